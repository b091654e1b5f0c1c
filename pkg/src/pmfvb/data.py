"""Synthetic data recipes, tabular CSV ingestion and seeded splits."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .nn import NnData

log = logging.getLogger(__name__)

MISSING = {"", "?", "na", "nan", "null"}


# --------------------------------------------------------------------------
# splitting and hashing
# --------------------------------------------------------------------------

def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation, so every size is within 1 of ``fraction * n``."""
    fr = np.asarray(fractions, dtype=float)
    if n < 3:
        raise InvalidArgument(f"need at least 3 rows to split, got {n}")
    if fr.ndim != 1 or fr.size == 0 or np.any(~np.isfinite(fr)) or np.any(fr <= 0):
        raise InvalidArgument(f"split fractions must all be positive, got {list(fractions)}")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"split fractions must sum to 1, got {fr.sum()}")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes.tolist()


def split_indices(n: int, fractions: Sequence[float], seed) -> list[np.ndarray]:
    sizes = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return [np.sort(part) for part in np.split(perm, cuts)]


def split_dataset(data, fractions: Sequence[float] = (0.53, 0.14, 0.33), seed=0):
    """Disjoint seeded partition of the rows of ``data`` (an ``NnData`` or any row-indexable array)."""
    n = len(data.y) if isinstance(data, NnData) else len(data)
    parts = split_indices(n, fractions, seed)
    if isinstance(data, NnData):
        return tuple(NnData(np.asarray(data.x)[p], np.asarray(data.y)[p]) for p in parts)
    return tuple(np.asarray(data)[p] for p in parts)


def data_sha(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# synthetic recipes
# --------------------------------------------------------------------------

def ar1_gaussian(n: int, p: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Rows from N(0, C) with C_ij = rho^|i-j|, built as a stationary AR(1) across columns."""
    e = rng.standard_normal((n, p))
    x = np.empty((n, p))
    x[:, 0] = e[:, 0]
    s = math.sqrt(1 - rho * rho)
    for j in range(1, p):
        x[:, j] = rho * x[:, j - 1] + s * e[:, j]
    return x


def nonlinear_mean(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = (x[:, j] for j in range(10))
    return (5 + 10 * x1 + 10 / (x2 ** 2 + 1) + 5 * x3 * x4 + 2 * x4 + 5 * x4 ** 2 + 5 * x5 + 2 * x6
            + 10 / (x7 ** 2 + 1) + 5 * x8 * x9 + 5 * x9 ** 2 + 5 * x10)


def generate_nonlinear_regression(n_train: int, n_val: int, n_test: int, seed, p: int = 20,
                                  rho: float = 0.5, noise_sd: float = 1.0) -> tuple[NnData, NnData, NnData]:
    """Twenty correlated Gaussian covariates, ten of them active, plus unit noise."""
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgument("split sizes must be >= 1")
    if p < 10:
        raise InvalidArgument("the regression function uses 10 covariates")
    rng = np.random.default_rng(seed)
    n = n_train + n_val + n_test
    x = ar1_gaussian(n, p, rho, rng)
    y = nonlinear_mean(x) + noise_sd * rng.standard_normal(n)
    a, b = n_train, n_train + n_val
    return NnData(x[:a], y[:a]), NnData(x[a:b], y[a:b]), NnData(x[b:], y[b:])


# Census-style schema: 6 numeric and 8 categorical covariates -> 6 + 97 = 103 encoded features.
CENSUS_NUMERIC = ("age", "fnlwgt", "education_num", "capital_gain", "capital_loss", "hours_per_week")
CENSUS_LEVELS = {
    "workclass": 7, "education": 16, "marital_status": 7, "occupation": 14,
    "relationship": 6, "race": 5, "sex": 2, "native_country": 40,
}
CENSUS_SCHEMA = {**{c: "numeric" for c in CENSUS_NUMERIC}, **{c: "categorical" for c in CENSUS_LEVELS},
                 "income": "response"}


def generate_census_like(n: int, seed) -> list[dict]:
    """Rows with the census schema and a logistic income response. A stand-in, not the real data."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = np.random.default_rng(seed)
    num = {
        "age": np.clip(rng.normal(39, 13, n), 17, 90).round(),
        "fnlwgt": np.exp(rng.normal(12, 0.5, n)).round(),
        "education_num": np.clip(rng.normal(10, 2.5, n), 1, 16).round(),
        "capital_gain": np.where(rng.random(n) < 0.08, np.exp(rng.normal(8, 1, n)), 0).round(),
        "capital_loss": np.where(rng.random(n) < 0.05, np.exp(rng.normal(7.5, 0.3, n)), 0).round(),
        "hours_per_week": np.clip(rng.normal(40, 12, n), 1, 99).round(),
    }
    cat = {}
    for name, k in CENSUS_LEVELS.items():
        # skewed level frequencies with a floor, so every level shows up in moderate samples
        w = 0.7 * rng.dirichlet(np.full(k, 0.7)) + 0.3 / k
        cat[name] = rng.choice(k, size=n, p=w / w.sum())
    eta = (-8.0 + 0.04 * num["age"] + 0.35 * num["education_num"] + 0.03 * num["hours_per_week"]
           + 0.0002 * num["capital_gain"] + 1.2 * (cat["marital_status"] == 0) + 0.4 * (cat["sex"] == 0)
           + 0.3 * np.sin(cat["occupation"]))
    y = rng.random(n) < 1 / (1 + np.exp(-eta))
    rows = []
    for i in range(n):
        r = {c: f"{num[c][i]:g}" for c in CENSUS_NUMERIC}
        r.update({c: f"{c}_{cat[c][i]}" for c in CENSUS_LEVELS})
        r["income"] = ">50K" if y[i] else "<=50K"
        rows.append(r)
    return rows


# Survey-style stand-in: 13 numeric plus categoricals with 30 dummies -> 43 features, continuous income.
SURVEY_NUMERIC = tuple(f"z{j}" for j in range(13))
SURVEY_LEVELS = {"state": 8, "education": 9, "occupation": 8, "household": 5}
SURVEY_SCHEMA = {**{c: "numeric" for c in SURVEY_NUMERIC}, **{c: "categorical" for c in SURVEY_LEVELS},
                 "income": "response"}


def generate_survey_like(n: int, seed) -> list[dict]:
    """Same-shape synthetic replacement for a proprietary household-income survey."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = ar1_gaussian(n, len(SURVEY_NUMERIC), 0.3, rng)
    cat = {name: rng.integers(k, size=n) for name, k in SURVEY_LEVELS.items()}
    effects = {name: rng.normal(0, 0.4, k) for name, k in SURVEY_LEVELS.items()}
    mean = 10.5 + 0.3 * z[:, 0] + 0.2 * np.tanh(z[:, 1] * z[:, 2]) - 0.1 * z[:, 3] ** 2
    mean = mean + sum(effects[c][cat[c]] for c in SURVEY_LEVELS)
    income = np.exp(mean + 0.5 * rng.standard_normal(n))
    rows = []
    for i in range(n):
        r = {c: f"{z[i, j]:.6g}" for j, c in enumerate(SURVEY_NUMERIC)}
        r.update({c: f"{c}_{cat[c][i]}" for c in SURVEY_LEVELS})
        r["income"] = f"{income[i]:.2f}"
        rows.append(r)
    return rows


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

def write_rows(path, rows: Sequence[Mapping], header: Sequence[str] | None = None) -> None:
    header = list(header or rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_matrix(path, x, y, x_names=None, y_name="y") -> None:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    names = list(x_names or [f"x{j + 1}" for j in range(x.shape[1])])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names + [y_name])
        for row, t in zip(x, np.asarray(y, dtype=float).reshape(-1)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def read_matrix(path, y_name="y") -> tuple[NnData, list[str]]:
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        body = np.array([[float(v) for v in row] for row in r if row], dtype=float)
    if y_name not in header:
        raise InvalidArgument(f"column {y_name!r} not found in {path}")
    j = header.index(y_name)
    body = body.reshape(-1, len(header))
    x = np.delete(body, j, axis=1)
    return NnData(x, body[:, j]), [h for h in header if h != y_name]


def read_rows(path, schema: Mapping[str, str]) -> tuple[list[dict], int]:
    """Rows restricted to the schema's columns. Rows with missing or malformed fields are dropped and counted."""
    kinds = set(schema.values())
    if not kinds <= {"numeric", "categorical", "response"} or list(schema.values()).count("response") != 1:
        raise InvalidArgument("schema values must be numeric/categorical with exactly one response")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, skipinitialspace=True)
        missing = [c for c in schema if c not in (reader.fieldnames or [])]
        if missing:
            raise InvalidArgument(f"columns missing from {path}: {missing}")
        rows, dropped = [], 0
        for raw in reader:
            vals = {c: (raw.get(c) or "").strip() for c in schema}
            ok = all(v.lower() not in MISSING for v in vals.values())
            if ok:
                try:
                    for c, kind in schema.items():
                        if kind == "numeric":
                            if not math.isfinite(float(vals[c])):
                                raise ValueError
                except ValueError:
                    ok = False
            if ok:
                rows.append(vals)
            else:
                dropped += 1
    if dropped:
        log.warning("dropped %d rows with missing or malformed values from %s", dropped, path)
    return rows, dropped


@dataclass
class TabularEncoder:
    """One-hot categoricals and standardised numerics; statistics come from ``fit`` rows only."""

    schema: dict
    means: dict = field(default_factory=dict)
    sds: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)
    response_levels: list | None = None

    @property
    def response(self) -> str:
        return next(c for c, k in self.schema.items() if k == "response")

    @property
    def feature_names(self) -> list[str]:
        names = []
        for c, kind in self.schema.items():
            if kind == "numeric":
                names.append(c)
            elif kind == "categorical":
                names.extend(f"{c}={lv}" for lv in self.levels[c])
        return names

    def fit(self, rows: Sequence[Mapping], positive: str | None = None) -> "TabularEncoder":
        if not rows:
            raise InvalidArgument("cannot fit an encoder on zero rows")
        for c, kind in self.schema.items():
            if kind == "numeric":
                v = np.array([float(r[c]) for r in rows])
                self.means[c] = float(v.mean())
                sd = float(v.std())
                self.sds[c] = sd if sd > 0 else 1.0
            elif kind == "categorical":
                self.levels[c] = sorted({r[c] for r in rows})
        resp = sorted({r[self.response] for r in rows})
        if len(resp) == 2 or positive is not None:
            if positive is not None and positive not in resp:
                raise InvalidArgument(f"positive label {positive!r} not present in the response")
            neg = [v for v in resp if v != positive] if positive else resp[:1]
            self.response_levels = [neg[0], positive or resp[1]]
        else:
            self.response_levels = None
        return self

    def transform(self, rows: Sequence[Mapping]) -> NnData:
        n = len(rows)
        cols = []
        unknown = 0
        for c, kind in self.schema.items():
            if kind == "numeric":
                v = np.array([float(r[c]) for r in rows], dtype=float)
                cols.append(((v - self.means[c]) / self.sds[c])[:, None])
            elif kind == "categorical":
                index = {lv: k for k, lv in enumerate(self.levels[c])}
                block = np.zeros((n, len(index)))
                for i, r in enumerate(rows):
                    k = index.get(r[c])
                    if k is None:
                        unknown += 1
                    else:
                        block[i, k] = 1.0
                cols.append(block)
        if unknown:
            log.warning("%d unseen category values encoded as all-zero rows", unknown)
        x = np.hstack(cols) if cols else np.zeros((n, 0))
        resp = [r[self.response] for r in rows]
        if self.response_levels is not None:
            pos = self.response_levels[1]
            bad = set(resp) - set(self.response_levels)
            if bad:
                raise InvalidArgument(f"unexpected response labels {sorted(bad)}")
            y = np.array([1.0 if v == pos else 0.0 for v in resp])
        else:
            y = np.array([float(v) for v in resp])
        return NnData(x, y)


@dataclass
class TabularDataset:
    x: np.ndarray
    y: np.ndarray
    feature_names: list
    n_dropped: int
    encoder: TabularEncoder

    @property
    def data(self) -> NnData:
        return NnData(self.x, self.y)


def load_tabular(path, schema: Mapping[str, str], response: str | None = None, encoder: TabularEncoder | None = None,
                 positive: str | None = None) -> TabularDataset:
    """Read a CSV, drop bad rows, one-hot categoricals and standardise numerics.

    With ``encoder`` the supplied (train-fitted) statistics are applied;
    otherwise they are fitted on this file.
    """
    schema = dict(schema)
    if response is not None:
        if schema.get(response) not in (None, "response"):
            raise InvalidArgument(f"response column {response!r} is declared as {schema[response]}")
        schema[response] = "response"
    if not Path(path).is_file():
        raise InvalidArgument(f"data file not found: {path}")
    rows, dropped = read_rows(path, schema)
    if not rows:
        raise InvalidArgument(f"no usable rows in {path}")
    enc = encoder or TabularEncoder(schema).fit(rows, positive)
    d = enc.transform(rows)
    return TabularDataset(d.x, d.y, enc.feature_names, dropped, enc)


def load_tabular_splits(path, schema: Mapping[str, str], fractions=(0.53, 0.14, 0.33), seed=0,
                        positive: str | None = None):
    """Split raw rows first, then fit the encoder on the training rows only."""
    rows, dropped = read_rows(path, dict(schema))
    parts = split_indices(len(rows), fractions, seed)
    train_rows = [rows[i] for i in parts[0]]
    enc = TabularEncoder(dict(schema)).fit(train_rows, positive)
    splits = tuple(enc.transform([rows[i] for i in p]) for p in parts)
    return splits, enc, dropped
