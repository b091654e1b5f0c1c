"""SGLD-family baselines and a MALA sampler used as a ground-truth oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure

__all__ = [
    "AdamSgldConfig",
    "DensityTarget",
    "MalaResult",
    "PsgldConfig",
    "SamplerState",
    "UnconstrainedTarget",
    "adam_sgld_step",
    "mala_sample",
    "psgld_step",
    "sgld_step",
]


def _check_step(h):
    if not (h > 0 and math.isfinite(h)):
        raise InvalidArgument(f"step size must be positive and finite, got {h}")


def _check_grad(g):
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("non-finite gradient estimate")
    return g


def sgld_step(theta, grad_estimate, h: float, rng: np.random.Generator) -> np.ndarray:
    """theta + (h/2) g + sqrt(h) N(0, I)."""
    _check_step(h)
    theta = np.asarray(theta, dtype=float)
    g = _check_grad(grad_estimate)
    noise = rng.standard_normal(theta.shape)
    return theta + (0.5 * h) * g + np.sqrt(h) * noise


@dataclass
class SamplerState:
    """Chain position plus sampler auxiliaries (``V`` for pSGLD, ``m``/``v`` for Adam-SGLD)."""

    theta: np.ndarray
    V: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        for name in ("V", "m", "v"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), self.theta.shape).copy()
                if not np.all(np.isfinite(val)):
                    raise InvalidArgument(f"sampler auxiliary {name} must be finite")
                setattr(self, name, val)
        if self.V is not None and np.any(self.V < 0):
            raise InvalidArgument("pSGLD second-moment estimate must be non-negative")
        if self.v is not None and np.any(self.v < 0):
            raise InvalidArgument("Adam-SGLD v must be non-negative")


@dataclass(frozen=True)
class PsgldConfig:
    rho: float = 0.99
    lam: float = 1e-5


def psgld_step(state: SamplerState, grad_estimate, h: float, rng: np.random.Generator,
               cfg: PsgldConfig = PsgldConfig()) -> SamplerState:
    """RMSprop-preconditioned SGLD without the curvature correction term.

    A state with ``V=None`` starts its second-moment estimate at ``g * g``.
    """
    _check_step(h)
    g = _check_grad(grad_estimate)
    V = g * g if state.V is None else cfg.rho * state.V + (1 - cfg.rho) * g * g
    G = 1.0 / (np.sqrt(V) + cfg.lam)
    noise = rng.standard_normal(state.theta.shape)
    theta = state.theta + (0.5 * h) * (G * g) + np.sqrt(h) * (np.sqrt(G) * noise)
    return SamplerState(theta, V=V)


@dataclass(frozen=True)
class AdamSgldConfig:
    a: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.99
    lam: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 <= 1 and 0 <= self.beta2 <= 1):
            raise InvalidArgument("beta1, beta2 must lie in [0, 1]")
        if self.a < 0 or self.lam < 0:
            raise InvalidArgument("a and lam must be non-negative")


def adam_sgld_step(state: SamplerState, grad_estimate, h: float, rng: np.random.Generator,
                   cfg: AdamSgldConfig = AdamSgldConfig()) -> SamplerState:
    """SGLD with the adaptive drift ``a * m / sqrt(v + lam)`` added to the gradient.

    ``m`` and ``v`` are exponential averages of ``g`` and ``g * g``; both start at zero.
    With ``a = 0`` the position update is bit-identical to :func:`sgld_step`.
    """
    _check_step(h)
    g = _check_grad(grad_estimate)
    m = np.zeros_like(state.theta) if state.m is None else state.m
    v = np.zeros_like(state.theta) if state.v is None else state.v
    drift = m / np.sqrt(v + cfg.lam) if cfg.lam > 0 or np.all(v > 0) else np.zeros_like(m)
    noise = rng.standard_normal(state.theta.shape)
    theta = state.theta + (0.5 * h) * (g + cfg.a * drift) + np.sqrt(h) * noise
    m_new = cfg.beta1 * m + (1 - cfg.beta1) * g
    v_new = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    return SamplerState(theta, m=m_new, v=v_new)


# --------------------------------------------------------------------------
# targets
# --------------------------------------------------------------------------

@dataclass
class DensityTarget:
    """Batched log density and gradient: ``(C, d) -> (C,)`` and ``(C, d) -> (C, d)``."""

    log_density: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int


_TRANSFORMS = ("identity", "log", "tanh")


class UnconstrainedTarget:
    """Reparameterise a target so every coordinate lives on the real line.

    ``transforms[j]`` names the map from the unconstrained ``z_j`` to the
    original coordinate: ``identity``, ``log`` (positive coordinate,
    ``theta = exp(z)``) or ``tanh`` (coordinate in (-1, 1)). The density in
    ``z`` includes the log-Jacobian and its gradient.
    """

    def __init__(self, target: DensityTarget, transforms: Sequence[str]):
        kinds = tuple(transforms)
        if len(kinds) != target.dim:
            raise InvalidArgument("one transform per coordinate is required")
        bad = set(kinds) - set(_TRANSFORMS)
        if bad:
            raise InvalidArgument(f"unknown transforms {sorted(bad)}")
        self.target = target
        self.transforms = kinds
        self.dim = target.dim
        k = np.array(kinds)
        self._log = np.flatnonzero(k == "log")
        self._tanh = np.flatnonzero(k == "tanh")

    def to_constrained(self, z):
        z = np.asarray(z, dtype=float)
        theta = z.copy()
        theta[..., self._log] = np.exp(z[..., self._log])
        theta[..., self._tanh] = np.tanh(z[..., self._tanh])
        return theta

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta[..., self._log] <= 0) or np.any(np.abs(theta[..., self._tanh]) >= 1):
            raise InvalidArgument("value outside the constrained domain")
        z = theta.copy()
        z[..., self._log] = np.log(theta[..., self._log])
        z[..., self._tanh] = np.arctanh(theta[..., self._tanh])
        return z

    def log_jacobian(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        zl, zt = z[:, self._log], z[:, self._tanh]
        # log(1 - tanh(z)^2) = 2 (log 2 - |z| - log1p(exp(-2|z|)))
        a = np.abs(zt)
        lt = 2 * (np.log(2.0) - a - np.log1p(np.exp(-2 * a)))
        return zl.sum(axis=1) + lt.sum(axis=1)

    def log_density(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.target.log_density(self.to_constrained(z)) + self.log_jacobian(z)

    def grad(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        theta = self.to_constrained(z)
        g = np.array(self.target.grad(theta), dtype=float)
        g[:, self._log] = g[:, self._log] * theta[:, self._log] + 1.0
        t = theta[:, self._tanh]
        g[:, self._tanh] = g[:, self._tanh] * (1 - t * t) - 2 * t
        return g


# --------------------------------------------------------------------------
# MALA
# --------------------------------------------------------------------------

TARGET_ACCEPT = 0.574


@dataclass
class MalaResult:
    samples: np.ndarray
    acceptance: float
    step_size: float
    precond: np.ndarray
    low_acceptance: bool = False
    chain_means: np.ndarray = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "mean": self.samples.mean(axis=0).tolist(),
            "var": self.samples.var(axis=0).tolist(),
            "acceptance": self.acceptance,
            "step_size": self.step_size,
            "low_acceptance": self.low_acceptance,
        }


def _safe_eval(target, Z):
    lp = np.asarray(target.log_density(Z), dtype=float)
    with np.errstate(all="ignore"):
        g = np.asarray(target.grad(Z), dtype=float) if np.any(np.isfinite(lp)) else np.full(Z.shape, np.nan)
    bad = ~np.isfinite(lp) | ~np.all(np.isfinite(g), axis=1)
    lp = np.where(bad, -np.inf, lp)
    g = np.where(bad[:, None], 0.0, g)
    return lp, g


def mala_sample(target, h: float, n_samples: int, burn_in: int, rng: np.random.Generator,
                x0=None, n_chains: int = 1, precond=None, adapt: bool = False, thin: int = 1) -> MalaResult:
    """Metropolis-adjusted Langevin sampling over ``n_chains`` independent chains.

    ``target`` exposes batched ``log_density`` and ``grad`` and ``dim``. The
    proposal is ``x + (h/2) P grad + sqrt(h P) xi`` for a fixed diagonal ``P``
    (identity by default). With ``adapt=True``, ``h`` and ``P`` are tuned
    during burn-in only: ``h`` moves towards 57.4% acceptance throughout, and
    when no ``precond`` is given ``P`` is set halfway through to the pooled
    variance of the second burn-in quarter. Post-burn-in draws therefore come
    from a fixed, valid kernel.

    Returns ``n_samples`` post-burn-in rows (draws interleaved across chains).
    """
    _check_step(h)
    if n_samples < 1 or burn_in < 0 or n_chains < 1 or thin < 1:
        raise InvalidArgument("need n_samples >= 1, burn_in >= 0, n_chains >= 1, thin >= 1")
    d = int(target.dim)
    X = np.zeros((n_chains, d)) if x0 is None else np.array(np.broadcast_to(x0, (n_chains, d)), dtype=float)
    P = np.ones(d) if precond is None else np.array(np.broadcast_to(precond, (d,)), dtype=float)
    if np.any(P <= 0):
        raise InvalidArgument("preconditioner must be positive")
    lp, g = _safe_eval(target, X)
    if not np.all(np.isfinite(lp)):
        raise InvalidArgument("initial state has zero target density")

    per_chain = -(-n_samples // n_chains)
    out = np.empty((per_chain, n_chains, d))
    accepted = 0
    proposed = 0
    window = max(1, min(50, burn_in // 20 or 1))
    win_acc = 0
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    n_stat = 0
    total = burn_in + per_chain * thin
    for it in range(total):
        sd = np.sqrt(h * P)
        mean_fwd = X + (0.5 * h) * P * g
        Y = mean_fwd + sd * rng.standard_normal(X.shape)
        lp_y, g_y = _safe_eval(target, Y)
        mean_bwd = Y + (0.5 * h) * P * g_y
        log_q_fwd = -0.5 * np.sum(((Y - mean_fwd) / sd) ** 2, axis=1)
        log_q_bwd = -0.5 * np.sum(((X - mean_bwd) / sd) ** 2, axis=1)
        with np.errstate(invalid="ignore"):
            log_alpha = lp_y - lp + log_q_bwd - log_q_fwd
        log_alpha = np.where(np.isfinite(lp_y), log_alpha, -np.inf)
        acc = np.log(rng.random(n_chains)) < log_alpha
        X = np.where(acc[:, None], Y, X)
        lp = np.where(acc, lp_y, lp)
        g = np.where(acc[:, None], g_y, g)
        n_acc = int(acc.sum())
        if it < burn_in:
            if adapt:
                win_acc += n_acc
                if burn_in // 4 <= it < burn_in // 2:
                    s1 += X.sum(axis=0)
                    s2 += (X * X).sum(axis=0)
                    n_stat += n_chains
                if (it + 1) % window == 0:
                    rate = win_acc / (window * n_chains)
                    h *= math.exp(2.0 * (rate - TARGET_ACCEPT))
                    win_acc = 0
                if it + 1 == burn_in // 2 and n_stat > 1 and precond is None:
                    var = s2 / n_stat - (s1 / n_stat) ** 2
                    P = np.maximum(var, 1e-12 * max(float(var.max()), 1e-300))
                    # standardised target: the usual MALA scaling h ~ 1.65^2 d^(-1/3)
                    h = 2.7 * d ** (-1.0 / 3.0)
        else:
            accepted += n_acc
            proposed += n_chains
            k = it - burn_in
            if (k + 1) % thin == 0:
                out[k // thin] = X
    samples = out.reshape(-1, d)[:n_samples]
    rate = accepted / proposed
    return MalaResult(samples, rate, float(h), P, rate < 0.01, out.mean(axis=0))
