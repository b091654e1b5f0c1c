"""Particle mean-field VB driver.

Each variational block is represented by a cloud of ``M`` particles. Blocks
whose optimal factor is intractable are moved by one unadjusted Langevin step
per iteration, with the expectation over the remaining blocks replaced by an
average over a random subsample of their particles. Blocks whose optimal
factor has closed form are refreshed analytically and re-sampled so that the
lower-bound estimate can pair particles by index.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure

__all__ = [
    "Block",
    "FactorizedTarget",
    "LmcConfig",
    "DiagonalPreconditioner",
    "ParticleCloud",
    "PmfvbResult",
    "RunTrace",
    "StoppingRule",
    "TraceRecord",
    "block_rng",
    "check_stop",
    "estimate_lower_bound",
    "lmc_block_update",
    "run_pmfvb",
    "smoothed_non_decreasing",
    "subsample_index_matrix",
    "subsample_indices",
]

# Floyd's sampler is O(rows * m^2); above this size random keys are cheaper.
_FLOYD_MAX_M = 64


@dataclass
class ParticleCloud:
    values: np.ndarray
    block_id: str = "x"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidArgument(f"cloud {self.block_id!r} must be an M x d array with M, d >= 1")
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v).all(axis=1))[0])
            raise NumericalFailure("non-finite particle", particle=bad, block=self.block_id)
        self.values = v

    @property
    def n_particles(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def var(self) -> np.ndarray:
        return self.values.var(axis=0)

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.values.copy(), self.block_id)


@dataclass(frozen=True)
class LmcConfig:
    """Langevin settings shared by every LMC block of a run.

    ``block_step_sizes`` overrides ``step_size`` per block (the h_x, h_y of
    the two-block scheme). ``clip_norm`` is an opt-in per-particle drift clip;
    without it a non-finite drift aborts the run.
    """

    step_size: float
    subsample_size: int = 1
    max_iters: int = 1000
    seed: int = 0
    block_step_sizes: Mapping[str, float] | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if not (self.step_size >= 0 and math.isfinite(self.step_size)):
            raise InvalidArgument(f"step_size must be a finite non-negative number, got {self.step_size}")
        if self.subsample_size < 1:
            raise InvalidArgument(f"subsample_size must be >= 1, got {self.subsample_size}")
        if self.max_iters < 0:
            raise InvalidArgument(f"max_iters must be >= 0, got {self.max_iters}")
        for name, h in (self.block_step_sizes or {}).items():
            if not (h >= 0 and math.isfinite(h)):
                raise InvalidArgument(f"step size for block {name!r} must be finite and >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise InvalidArgument("clip_norm must be positive")

    def step_for(self, block_id: str) -> float:
        if self.block_step_sizes and block_id in self.block_step_sizes:
            return float(self.block_step_sizes[block_id])
        return float(self.step_size)


@dataclass(frozen=True)
class StoppingRule:
    kind: str = "lower-bound-plateau"
    window: int = 50
    patience: int = 100
    tolerance: float = 0.0

    KINDS = ("lower-bound-plateau", "validation-patience")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgument(f"unknown stopping rule {self.kind!r}; expected one of {self.KINDS}")
        if self.window < 1:
            raise InvalidArgument("window must be >= 1")
        if self.patience < 1:
            raise InvalidArgument("patience must be >= 1")
        if not self.tolerance >= 0:
            raise InvalidArgument("tolerance must be >= 0")


@dataclass
class TraceRecord:
    iter: int
    lower_bound: float
    smoothed_lb: float | None = None
    val_score: float | None = None
    wall_ms: float | None = None


CSV_HEADER = ("iter", "lower_bound", "smoothed_lb", "val_score", "wall_ms")


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _parse(text: str):
    return float(text) if text != "" else None


@dataclass
class RunTrace:
    """Per-iteration lower bound, its rolling-window mean and optional validation score."""

    window: int = 50
    records: list[TraceRecord] = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.records)

    def append(self, iter: int, lower_bound: float, val_score: float | None = None,
               wall_ms: float | None = None) -> TraceRecord:
        if self.records and iter <= self.records[-1].iter:
            raise InvalidArgument(f"trace iterations must increase (got {iter} after {self.records[-1].iter})")
        lb = float(lower_bound)
        smoothed = None
        if len(self.records) + 1 >= self.window:
            tail = [r.lower_bound for r in self.records[len(self.records) + 1 - self.window:]] + [lb]
            smoothed = float(np.mean(tail))
        rec = TraceRecord(int(iter), lb, smoothed,
                          None if val_score is None else float(val_score),
                          None if wall_ms is None else float(wall_ms))
        self.records.append(rec)
        return rec

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.array([r.lower_bound for r in self.records], dtype=float)

    @property
    def smoothed(self) -> np.ndarray:
        return np.array([np.nan if r.smoothed_lb is None else r.smoothed_lb for r in self.records])

    @property
    def val_scores(self) -> np.ndarray:
        return np.array([np.nan if r.val_score is None else r.val_score for r in self.records])

    def to_csv(self, path, include_wall: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow([r.iter, _fmt(r.lower_bound), _fmt(r.smoothed_lb), _fmt(r.val_score),
                            _fmt(r.wall_ms) if include_wall else ""])

    @classmethod
    def from_csv(cls, path, window: int = 50) -> "RunTrace":
        trace = cls(window=window)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise InvalidArgument(f"unexpected trace header {header}")
            for row in reader:
                trace.records.append(TraceRecord(int(row[0]), float(row[1]), _parse(row[2]),
                                                 _parse(row[3]), _parse(row[4])))
        return trace


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

def block_rng(seed: int, iteration: int, block_index: int) -> np.random.Generator:
    """Independent stream for one block's half-iteration.

    All per-particle draws of that half-iteration come from this stream in a
    fixed order, row ``i`` belonging to particle ``i``.
    """
    return np.random.default_rng([int(seed), int(iteration), int(block_index)])


def subsample_index_matrix(n_rows: int, M: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``n_rows`` independent size-``m`` subsets of ``range(M)`` drawn without replacement."""
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if not 1 <= m <= M:
        raise InvalidArgument(f"subsample size m={m} must satisfy 1 <= m <= M={M}")
    if m == M:
        return np.tile(np.arange(M), (n_rows, 1))
    if m <= _FLOYD_MAX_M:
        out = np.empty((n_rows, m), dtype=np.int64)
        for k, j in enumerate(range(M - m, M)):
            t = rng.integers(0, j + 1, size=n_rows)
            if k:
                t = np.where((out[:, :k] == t[:, None]).any(axis=1), j, t)
            out[:, k] = t
        return out
    keys = rng.random((n_rows, M))
    return np.argpartition(keys, m - 1, axis=1)[:, :m]


def subsample_indices(M: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return subsample_index_matrix(1, M, m, rng)[0]


# --------------------------------------------------------------------------
# Langevin block move
# --------------------------------------------------------------------------

def _check_finite(arr: np.ndarray, what: str, block: str) -> None:
    ok = np.isfinite(arr).all(axis=1)
    if not ok.all():
        raise NumericalFailure(f"non-finite {what}", particle=int(np.flatnonzero(~ok)[0]), block=block)


def _clip_rows(drift: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.linalg.norm(drift, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return drift * scale


GradFn = Callable[[np.ndarray, Mapping[str, np.ndarray]], np.ndarray]


class DiagonalPreconditioner:
    """Fixed positive diagonal ``P``: coordinate ``j`` moves with step ``h * P[j]``.

    Any object with the same two methods can be passed as a preconditioner:
    ``apply(G)`` returns ``G P`` row-wise and ``sqrt_apply(N)`` returns rows
    with covariance ``P`` when the rows of ``N`` are standard normal.
    """

    def __init__(self, scale):
        self.scale = np.asarray(scale, dtype=float).reshape(-1)
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise InvalidArgument("preconditioner entries must be positive and finite")
        self._sqrt = np.sqrt(self.scale)

    def apply(self, G):
        return self.scale * G

    def sqrt_apply(self, N):
        return self._sqrt * N


def lmc_block_update(cloud: ParticleCloud, other_clouds: Sequence[ParticleCloud], grad: GradFn,
                     cfg: LmcConfig, rng: np.random.Generator,
                     step_size: float | None = None, precond=None) -> ParticleCloud:
    """One Langevin move of every particle in ``cloud``.

    ``grad(own, others)`` is evaluated row-wise: ``own`` is ``(N, d)`` and
    ``others`` maps block ids to ``(N, d_o)`` arrays paired by row. Particle
    ``i`` averages the gradient over its own subsample of ``m`` particle
    indices of the other blocks; with no other blocks the drift is simply
    ``grad(own, {})``.

    ``precond`` (a :class:`DiagonalPreconditioner`, an equivalent object,
    or a positive length-``d`` vector) turns the move into
    ``X + (h/2) P drift + sqrt(h) P^(1/2) noise``; the stationary law of the
    continuous dynamics is unchanged.

    Draw order on ``rng``: subsample indices (skipped when ``m == M`` or
    there are no other blocks), then one ``(M, d)`` standard-normal matrix.
    """
    X = cloud.values
    M, d = X.shape
    h = cfg.step_for(cloud.block_id) if step_size is None else float(step_size)
    for c in other_clouds:
        if c.n_particles != M:
            raise InvalidArgument(f"block {c.block_id!r} has {c.n_particles} particles, expected {M}")

    if other_clouds:
        m = cfg.subsample_size
        if m > M:
            raise InvalidArgument(f"subsample_size m={m} exceeds number of particles M={M}")
        idx = subsample_index_matrix(M, M, m, rng)
    noise = rng.standard_normal((M, d))

    if other_clouds:
        acc = np.zeros_like(X)
        for k in range(m):
            sel = idx[:, k]
            acc += grad(X, {c.block_id: c.values[sel] for c in other_clouds})
        drift = acc / m
    else:
        drift = np.asarray(grad(X, {}), dtype=float)
    if drift.shape != X.shape:
        raise InvalidArgument(f"gradient for block {cloud.block_id!r} has shape {drift.shape}, expected {X.shape}")
    if cfg.clip_norm is not None:
        drift = _clip_rows(np.nan_to_num(drift, nan=0.0), cfg.clip_norm)
    _check_finite(drift, "gradient", cloud.block_id)

    if precond is not None and not hasattr(precond, "apply"):
        precond = DiagonalPreconditioner(precond)
    # overflow surfaces as NumericalFailure from the cloud check below
    with np.errstate(over="ignore", invalid="ignore"):
        if precond is None:
            new = X + (0.5 * h) * drift + np.sqrt(h) * noise
        else:
            new = X + (0.5 * h) * precond.apply(drift) + np.sqrt(h) * precond.sqrt_apply(noise)
    return ParticleCloud(new, cloud.block_id)


# --------------------------------------------------------------------------
# lower bound and stopping
# --------------------------------------------------------------------------

def _stable_mean(v: np.ndarray) -> float:
    # shifting by the first value keeps a constant vector's mean exact
    v0 = v[0]
    return float(v0 + np.mean(v - v0))


def estimate_lower_bound(clouds, log_unnorm_target: Callable[[np.ndarray], np.ndarray]) -> float:
    """Particle estimate of the evidence lower bound.

    Particles are paired by index across blocks; the entropy of the particle
    approximation is taken as ``log M``.
    """
    arrays = [c.values if isinstance(c, ParticleCloud) else np.atleast_2d(np.asarray(c, dtype=float))
              for c in clouds]
    if not arrays:
        raise InvalidArgument("at least one cloud is required")
    M = arrays[0].shape[0]
    if any(a.shape[0] != M for a in arrays):
        raise InvalidArgument("all clouds must have the same number of particles")
    theta = np.concatenate(arrays, axis=1)
    vals = np.asarray(log_unnorm_target(theta), dtype=float).reshape(-1)
    if vals.shape[0] != M:
        raise InvalidArgument("log target must return one value per particle")
    bad = ~np.isfinite(vals)
    if bad.any():
        raise NumericalFailure("non-finite log target in lower bound", particle=int(np.flatnonzero(bad)[0]))
    return _stable_mean(vals) + math.log(M)


def smoothed_non_decreasing(lower_bounds, window: int = 50, burn_in: float = 0.25, n_chunks: int = 10,
                            z: float = 3.0) -> bool:
    """Whether the window-smoothed bound never falls after burn-in, up to Monte Carlo noise.

    The post-burn-in smoothed series is cut into ``n_chunks`` pieces. Each piece's
    mean may sit below the best earlier piece by at most ``z`` noise units. The unit
    is the standard deviation of the raw bound over the final piece, which is
    autocorrelation-agnostic: successive LMC bounds are strongly correlated, so a
    standard error that assumed independence would flag ordinary stationary wander.
    """
    lb = np.asarray(lower_bounds, dtype=float)
    if not 0.0 <= burn_in < 1.0 or window < 1 or n_chunks < 2:
        raise InvalidArgument("need 0 <= burn_in < 1, window >= 1 and n_chunks >= 2")
    lb = lb[int(burn_in * lb.size):]
    if lb.size < window + 2 * n_chunks:
        raise InvalidArgument("trace too short for the requested window and chunks")
    csum = np.concatenate([[0.0], np.cumsum(lb - lb[0])])
    smoothed = (csum[window:] - csum[:-window]) / window
    means = np.array([c.mean() for c in np.array_split(smoothed, n_chunks)])
    noise = z * np.std(np.array_split(lb, n_chunks)[-1])
    return bool(np.all(means[1:] >= np.maximum.accumulate(means)[:-1] - noise))


def check_stop(trace: RunTrace, rule: StoppingRule) -> bool:
    if len(trace) == 0:
        raise InvalidArgument("cannot evaluate a stopping rule on an empty trace")
    if rule.kind == "validation-patience":
        scores = [r.val_score for r in trace.records]
        if any(s is None for s in scores):
            raise InvalidArgument("validation-patience rule needs a validation score on every record")
        s = np.asarray(scores, dtype=float)
        best = int(np.argmin(s))  # first occurrence of the minimum
        return (len(s) - 1 - best) > rule.patience

    lb = trace.lower_bounds
    need = rule.window + rule.patience
    if lb.size < need:
        return False
    tail = lb[-need:]
    csum = np.concatenate([[0.0], np.cumsum(tail - tail[0])])
    smoothed = (csum[rule.window:] - csum[:-rule.window]) / rule.window  # patience + 1 values
    return bool(np.max(smoothed[1:]) - smoothed[0] <= rule.tolerance)


# --------------------------------------------------------------------------
# targets and the driver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    name: str
    dim: int
    kind: str = "lmc"

    def __post_init__(self):
        if self.kind not in ("lmc", "analytic"):
            raise InvalidArgument(f"block kind must be 'lmc' or 'analytic', got {self.kind!r}")
        if self.dim < 1:
            raise InvalidArgument("block dimension must be >= 1")


class FactorizedTarget:
    """Interface for targets consumed by :func:`run_pmfvb`.

    Subclasses set ``blocks`` and implement ``log_joint`` plus, per block,
    either ``block_grad`` (LMC blocks) or ``analytic_update``/``sample_factor``
    (analytic blocks). ``factors`` holds the current parameters of every
    analytic factor, keyed by block name.
    """

    blocks: tuple[Block, ...] = ()

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise InvalidArgument(f"unknown block {name!r}")

    def split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.atleast_2d(theta)
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = theta[:, start:start + b.dim]
            start += b.dim
        return out

    def concat(self, parts: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.atleast_2d(parts[b.name]) for b in self.blocks], axis=1)

    def log_joint(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def block_grad(self, name: str, own: np.ndarray, others: Mapping[str, np.ndarray],
                   factors: Mapping[str, dict]) -> np.ndarray:
        raise NotImplementedError(f"block {name!r} has no gradient")

    def initial_factors(self) -> dict[str, dict]:
        return {}

    def analytic_update(self, name: str, clouds: Mapping[str, ParticleCloud],
                        factors: Mapping[str, dict]) -> dict:
        raise NotImplementedError(f"block {name!r} has no analytic update")

    def sample_factor(self, name: str, params: dict, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError(f"block {name!r} cannot be sampled")

    def preconditioner(self, name: str, clouds: Mapping[str, ParticleCloud], factors: Mapping[str, dict]):
        """Optional Langevin preconditioner for an LMC block, rebuilt every iteration."""
        return None

    def constrain(self, name: str, values: np.ndarray) -> np.ndarray:
        """Post-move projection hook; identity unless a block has a bounded domain."""
        return values


class PmfvbResult(NamedTuple):
    clouds: dict[str, ParticleCloud]
    trace: RunTrace
    factors: dict[str, dict]


def _initial_values(spec, n: int, rng: np.random.Generator, block: Block) -> np.ndarray:
    if callable(spec):
        values = spec(n, rng)
    else:
        values = np.array(spec, dtype=float, copy=True)
    values = np.asarray(values, dtype=float).reshape(n, block.dim)
    return values


def run_pmfvb(target: FactorizedTarget, init: Mapping, cfg: LmcConfig, rule: StoppingRule | None = None,
              n_particles: int | None = None,
              validate: Callable[[Mapping[str, ParticleCloud], Mapping[str, dict]], float] | None = None,
              callback: Callable[[int, Mapping[str, ParticleCloud], Mapping[str, dict]], None] | None = None,
              ) -> PmfvbResult:
    """Alternate block updates until the stopping rule fires or ``max_iters``.

    ``init`` maps every LMC block to an ``(M, d)`` array or to a sampler
    ``f(M, rng)``; analytic blocks start from ``target.initial_factors()``.
    Blocks are updated in declaration order and each sees the newest state of
    the blocks before it. ``trace.truncated`` is set when the loop ends on
    ``max_iters`` rather than on the rule.
    """
    rule = rule or StoppingRule()
    lmc_blocks = [b for b in target.blocks if b.kind == "lmc"]
    if not target.blocks:
        raise InvalidArgument("target declares no blocks")
    missing = [b.name for b in lmc_blocks if b.name not in init]
    if missing:
        raise InvalidArgument(f"no initial particles for blocks {missing}")

    if n_particles is None:
        if not lmc_blocks:
            raise InvalidArgument("n_particles is required when every block is analytic")
        first = init[lmc_blocks[0].name]
        if callable(first):
            raise InvalidArgument("n_particles is required when initial clouds are given as samplers")
        n_particles = np.asarray(first).shape[0]
    M = int(n_particles)
    if M < 1:
        raise InvalidArgument("need at least one particle")
    if len(lmc_blocks) > 1 and cfg.subsample_size > M:
        raise InvalidArgument(f"subsample_size m={cfg.subsample_size} exceeds number of particles M={M}")

    init_rng = np.random.default_rng([int(cfg.seed), 0, len(target.blocks)])
    factors = {k: dict(v) for k, v in target.initial_factors().items()}
    clouds: dict[str, ParticleCloud] = {}
    for b in target.blocks:
        if b.kind == "lmc":
            clouds[b.name] = ParticleCloud(_initial_values(init[b.name], M, init_rng, b), b.name)
        else:
            clouds[b.name] = ParticleCloud(target.sample_factor(b.name, factors[b.name], M, init_rng), b.name)

    trace = RunTrace(window=rule.window)
    if cfg.max_iters == 0:
        trace.truncated = True
        return PmfvbResult(clouds, trace, factors)

    t0 = time.perf_counter()
    for it in range(1, cfg.max_iters + 1):
        for bi, b in enumerate(target.blocks):
            rng = block_rng(cfg.seed, it, bi)
            if b.kind == "analytic":
                factors[b.name] = target.analytic_update(b.name, clouds, factors)
                clouds[b.name] = ParticleCloud(target.sample_factor(b.name, factors[b.name], M, rng), b.name)
                continue
            others = [clouds[o.name] for o in lmc_blocks if o.name != b.name]

            def grad(own, other_vals, _name=b.name):
                return target.block_grad(_name, own, other_vals, factors)

            moved = lmc_block_update(clouds[b.name], others, grad, cfg, rng,
                                     precond=target.preconditioner(b.name, clouds, factors))
            values = target.constrain(b.name, moved.values)
            clouds[b.name] = ParticleCloud(values, b.name)

        lb = estimate_lower_bound([clouds[b.name] for b in target.blocks], target.log_joint)
        score = validate(clouds, factors) if validate is not None else None
        trace.append(it, lb, score, (time.perf_counter() - t0) * 1e3)
        if callback is not None:
            callback(it, clouds, factors)
        if check_stop(trace, rule):
            return PmfvbResult(clouds, trace, factors)
    trace.truncated = True
    return PmfvbResult(clouds, trace, factors)
