"""Command-line entry point: ``run``, ``sweep``, ``gen-data`` and ``oracle``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Errors are
printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import os
import platform
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .errors import DomainError, InvalidArgument, NumericalFailure

log = logging.getLogger("pmfvb")

EXPERIMENTS = ("gaussian-toy", "logistic", "sv", "nn-regression", "nn-classification")
METHODS = ("pmfvb", "sgld", "psgld", "adam-sgld", "mala")
ALLOWED = {
    "gaussian-toy": {"pmfvb", "mala"},
    "logistic": {"pmfvb", "mala"},
    "sv": {"pmfvb", "mala"},
    "nn-regression": {"pmfvb", "sgld", "psgld", "adam-sgld"},
    "nn-classification": {"pmfvb", "sgld", "psgld", "adam-sgld"},
}
STOP_KINDS = ("none", "lower-bound-plateau", "validation-patience")
WORKERS_ENV = "PMFVB_WORKERS"

# Per-experiment defaults; the NN step sizes differ per method and are keyed by it.
DEFAULTS = {
    "gaussian-toy": {"particles": 2000, "step_size": 0.05, "subsample": 10, "max_iters": 1000,
                     "stopping": {"kind": "none", "window": 50},
                     "model": {"mean": [0.0, 0.0], "cov": [[1.0, 0.5], [0.5, 1.0]]},
                     "sampler": {"h": 1.0, "n_samples": 100_000, "burn_in": 500, "chains": 100}},
    "logistic": {"particles": 3000, "step_size": 0.005, "subsample": 5, "max_iters": 600,
                 "stopping": {"kind": "none", "window": 50},
                 "model": {"prior_var": 4.0}, "data": {"n": 200, "d": 4, "seed": 0},
                 "sampler": {"h": 0.01, "n_samples": 1_000_000, "burn_in": 2000, "chains": 200}},
    "sv": {"particles": 500, "step_size": 0.05, "subsample": 1, "max_iters": 8000,
           "stopping": {"kind": "none", "window": 50},
           "data": {"T": 500, "mu": 1.0, "phi": 0.8, "sigma": 0.5, "seed": 1},
           "sampler": {"h": 0.01, "n_samples": 400_000, "burn_in": 6000, "chains": 200, "dump_rows": 20000}},
    "nn-regression": {"particles": 50, "subsample": 1, "max_iters": 4000,
                      "stopping": {"kind": "validation-patience", "window": 1, "patience": 1000},
                      "model": {"hidden": [10]}, "data": {"source": "synthetic", "seed": 0},
                      "sampler": {"batch_size": 500}},
    "nn-classification": {"particles": 50, "subsample": 1, "max_iters": 4000,
                          "stopping": {"kind": "validation-patience", "window": 1, "patience": 1000},
                          "model": {"hidden": [10]}, "data": {"source": "census-like", "n": 5000, "seed": 0},
                          "sampler": {"batch_size": 500}},
}
# chosen by a step-size grid on the synthetic regression task at a 4000-iteration cap
NN_STEP = {"pmfvb": 5e-5, "sgld": 2e-5, "psgld": 1e-2, "adam-sgld": 1e-5}

OVERRIDES = {"seed": "seed", "out": "out", "particles": "particles", "step_size": "step_size",
             "subsample": "subsample", "max_iters": "max_iters"}


class ConfigError(InvalidArgument):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """A config document, or a previous run's ``run_meta.json`` (its ``config`` entry)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    return doc["config"] if "config" in doc and isinstance(doc["config"], dict) else doc


def resolve_config(doc: dict, overrides: dict | None = None) -> dict:
    """Defaults < file < flags, then validated."""
    doc = dict(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[OVERRIDES[k]] = v
    exp = doc.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {EXPERIMENTS}, got {exp!r}")
    method = doc.get("method", "pmfvb")
    if method not in METHODS:
        raise ConfigError("method", f"must be one of {METHODS}, got {method!r}")
    if method not in ALLOWED[exp]:
        raise ConfigError("method", f"{method!r} is not available for experiment {exp!r}")
    base = {"experiment": exp, "method": method, "seed": 0, "out": "runs/out",
            "stopping": {}, "model": {}, "data": {}, "sampler": {}}
    base = _merge(base, DEFAULTS[exp])
    if exp.startswith("nn-"):
        base["step_size"] = NN_STEP[method]
    cfg = _merge(base, doc)
    validate_config(cfg)
    return cfg


def _num(cfg, key, lo, hi=math.inf, integer=False, lo_open=False):
    v = cfg.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(key, f"must be an integer, got {v!r}")
    if not math.isfinite(v) or v < lo or v > hi or (lo_open and v == lo):
        bound = f"> {lo}" if lo_open else f">= {lo}"
        raise ConfigError(key, f"must be {bound}{'' if hi == math.inf else f' and <= {hi}'}, got {v!r}")


def validate_config(cfg: dict) -> None:
    _num(cfg, "seed", 0, integer=True)
    _num(cfg, "particles", 1, integer=True)
    _num(cfg, "step_size", 0, lo_open=True)
    _num(cfg, "max_iters", 0, integer=True)
    _num(cfg, "subsample", 1, integer=True)
    if cfg["subsample"] > cfg["particles"]:
        raise ConfigError("subsample", f"m={cfg['subsample']} exceeds the number of particles M={cfg['particles']}")
    s = cfg["stopping"]
    if s.get("kind", "none") not in STOP_KINDS:
        raise ConfigError("stopping.kind", f"must be one of {STOP_KINDS}")
    for k in ("window", "patience"):
        if k in s and (not isinstance(s[k], int) or s[k] < 1):
            raise ConfigError(f"stopping.{k}", "must be an integer >= 1")
    if "tolerance" in s and not (isinstance(s["tolerance"], (int, float)) and s["tolerance"] >= 0):
        raise ConfigError("stopping.tolerance", "must be >= 0")
    d = cfg["data"]
    if d.get("source") == "csv":
        if not d.get("path") or not Path(d["path"]).is_file():
            raise ConfigError("data.path", f"file not found: {d.get('path')!r}")
    if "fractions" in d:
        fr = d["fractions"]
        if (not isinstance(fr, list) or len(fr) != 3 or any(not isinstance(f, (int, float)) or f <= 0 for f in fr)
                or abs(sum(fr) - 1) > 1e-9):
            raise ConfigError("data.fractions", f"need three positive fractions summing to 1, got {fr!r}")
    sampler = cfg["sampler"]
    for k in ("a", "lam", "h", "init_sd"):
        if k in sampler and not (isinstance(sampler[k], (int, float)) and sampler[k] >= 0):
            raise ConfigError(f"sampler.{k}", "must be a non-negative number")
    if "batch_size" in sampler and sampler["batch_size"] is not None and not (
            isinstance(sampler["batch_size"], int) and sampler["batch_size"] >= 1):
        raise ConfigError("sampler.batch_size", "must be an integer >= 1 or null")
    for k in ("beta1", "beta2", "rho"):
        if k in sampler and not (isinstance(sampler[k], (int, float)) and 0 <= sampler[k] <= 1):
            raise ConfigError(f"sampler.{k}", "must lie in [0, 1]")
    if "block_fraction" in sampler and not (isinstance(sampler["block_fraction"], (int, float))
                                            and 0 < sampler["block_fraction"] <= 1):
        raise ConfigError("sampler.block_fraction", "must lie in (0, 1]")
    if cfg["experiment"] == "gaussian-toy":
        try:
            from .experiments import toy_model

            toy_model(cfg)
        except InvalidArgument as e:
            raise ConfigError("model", str(e)) from None


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def version_string() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_table(path, columns, table) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in np.atleast_2d(table):
            w.writerow([repr(float(v)) for v in row])


def write_timing(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "wall_ms"])
        for r in trace.records:
            w.writerow([r.iter, "" if r.wall_ms is None else repr(float(r.wall_ms))])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def execute(cfg: dict) -> dict:
    """Run one resolved config and write its output directory. Returns the metrics."""
    from .experiments import run

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outcome = run(cfg)
    wall = time.perf_counter() - t0
    if outcome.trace is not None:
        outcome.trace.to_csv(out / "trace.csv", include_wall=False)
        write_timing(out / "timing.csv", outcome.trace)
    if outcome.table is not None:
        write_table(out / outcome.table_name, outcome.columns, outcome.table)
    metrics = {**outcome.metrics, "wall_seconds": wall}
    dump_json(out / "metrics.json", metrics)
    dump_json(out / "run_meta.json", {
        "config": cfg, "version": version_string(), "wall_seconds": wall,
        "python": platform.python_version(), "numpy": np.__version__,
    })
    return metrics


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def grid_points(grid: dict) -> list[dict]:
    if not isinstance(grid, dict) or not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("grid", "need a non-empty mapping of parameter -> non-empty list of values")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_cell(args):
    cfg = args
    try:
        return cfg, execute(cfg), None
    except Exception as e:  # a failed cell is recorded, the sweep goes on
        return cfg, None, f"{type(e).__name__}: {e}"


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        out[prefix] = float(obj)


def sweep(template: dict, grid: dict, seeds, out, workers: int | None = None) -> list[dict]:
    """Every grid point times every seed; writes ``cells.csv`` and the mean/sd ``summary.csv``."""
    points = grid_points(grid)
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for pi, point in enumerate(points):
        for s in seeds:
            doc = copy.deepcopy(template)
            for k, v in point.items():
                _set_path(doc, k, v)
            doc["seed"] = s
            doc["out"] = str(out / f"cell{pi:03d}_seed{s}")
            jobs.append((pi, resolve_config(doc)))
    workers = workers or int(os.environ.get(WORKERS_ENV, "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_cell, [c for _, c in jobs]))
    else:
        results = [_sweep_cell(c) for _, c in jobs]

    cell_rows, summary = [], []
    for pi, point in enumerate(points):
        rows = [(cfg, m, err) for (p, _), (cfg, m, err) in zip(jobs, results) if p == pi]
        flat = []
        for cfg, m, err in rows:
            cell_rows.append({**{f"param:{k}": v for k, v in point.items()}, "seed": cfg["seed"],
                              "status": "ok" if err is None else "failed", "error": err or "", "out": cfg["out"]})
            if m is not None:
                f = {}
                _flatten("", m, f)
                flat.append(f)
        row = {**{f"param:{k}": v for k, v in point.items()}, "n_ok": len(flat), "n_failed": len(rows) - len(flat)}
        for key in sorted({k for f in flat for k in f}):
            vals = np.array([f[key] for f in flat if key in f])
            row[f"{key}:mean"] = float(vals.mean())
            row[f"{key}:sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        summary.append(row)
    _write_dicts(out / "cells.csv", cell_rows)
    _write_dicts(out / "summary.csv", summary)
    return summary


def _write_dicts(path, rows):
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

GEN_KINDS = ("nonlinear", "sv", "logistic", "census-like", "survey-like")


def gen_data(kind: str, out, seed: int, n: int | None) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "nonlinear":
        tr, _, _ = D.generate_nonlinear_regression(n or 5000, 1, 1, seed)
        D.write_matrix(out, tr.x, tr.y)
    elif kind == "sv":
        from .sv import generate_sv_data

        y = generate_sv_data(n or 500, 1.0, 0.8, 0.5, seed).y
        D.write_matrix(out, np.arange(1, y.size + 1)[:, None], y, ["t"])
    elif kind == "logistic":
        from .targets import generate_logistic_data

        model, _ = generate_logistic_data(n or 200, 4, 4.0, seed)
        D.write_matrix(out, model.X[:, 1:], model.y)
    elif kind == "census-like":
        D.write_rows(out, D.generate_census_like(n or 5000, seed))
    elif kind == "survey-like":
        D.write_rows(out, D.generate_survey_like(n or 5000, seed))
    else:
        raise ConfigError("kind", f"must be one of {GEN_KINDS}")
    return out


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmfvb", description="Particle mean-field VB experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON config (or a previous run_meta.json)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--particles", type=int)
        sp.add_argument("--step-size", type=float, dest="step_size")
        sp.add_argument("--subsample", type=int)
        sp.add_argument("--max-iters", type=int, dest="max_iters")

    common(sub.add_parser("run", help="run one experiment"))
    sw = sub.add_parser("sweep", help="grid x seeds with mean/sd summary")
    common(sw)
    sw.add_argument("--grid", required=True, help="JSON object: parameter (dotted path) -> list of values")
    sw.add_argument("--seeds", type=int, default=10, help="number of replicate seeds, starting at --seed")
    sw.add_argument("--workers", type=int)
    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--kind", required=True, choices=GEN_KINDS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int)
    o = sub.add_parser("oracle", help="ground truth for an experiment: analytic for the toy, MALA otherwise")
    common(o)
    return p


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in OVERRIDES}


def _fail(code: int, kind: str, message: str, field: str | None = None) -> int:
    err = {"error": kind, "message": message}
    if field is not None:
        err["field"] = field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            path = gen_data(args.kind, args.out, args.seed, args.n)
            print(str(path))
            return 0
        doc = load_config(args.config)
        if args.command == "sweep":
            try:
                grid = json.loads(args.grid) if args.grid.lstrip().startswith("{") else load_config(args.grid)
            except json.JSONDecodeError as e:
                raise ConfigError("grid", f"invalid JSON: {e}") from None
            ov = _overrides(args)
            base_seed = ov.pop("seed") or 0
            out = ov.pop("out") or doc.get("out", "runs/sweep")
            template = {**doc, **{k: v for k, v in ov.items() if v is not None}}
            summary = sweep(template, grid, range(base_seed, base_seed + args.seeds), out, args.workers)
            print(json.dumps({"out": str(out), "cells": len(summary)}))
            return 0
        if args.command == "oracle":
            cfg = resolve_config({**doc, "method": "mala"} if doc.get("experiment") != "gaussian-toy" else doc,
                                 _overrides(args))
            if cfg["experiment"] == "gaussian-toy":
                from .experiments import toy_model
                from .targets import gaussian_toy_mean_field_optimum

                Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
                opt = gaussian_toy_mean_field_optimum(toy_model(cfg))
                dump_json(Path(cfg["out"]) / "metrics.json",
                          {"oracle_means": [o[0] for o in opt], "oracle_vars": [o[1] for o in opt]})
            else:
                execute(cfg)
            print(json.dumps({"out": cfg["out"]}))
            return 0
        cfg = resolve_config(doc, _overrides(args))
        m = execute(cfg)
        print(json.dumps({"out": cfg["out"], "metrics": m}, default=_json_default))
        return 0
    except ConfigError as e:
        return _fail(2, "config", str(e), e.field)
    except (NumericalFailure, DomainError, InvalidArgument, OSError, ValueError, ArithmeticError) as e:
        return _fail(1, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
