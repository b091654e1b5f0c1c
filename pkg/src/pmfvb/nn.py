"""Particle MFVB for Bayesian multilayer perceptrons.

The weights carry an adaptive ridge prior ``w_j ~ N(0, tau_j)`` with
``tau_j ~ IG(alpha0, beta0)``; regression adds Gaussian noise with variance
``sigma^2`` under the scale-invariant prior. ``q(tau)`` and ``q(sigma^2)`` are
Inverse-Gamma and refreshed from particle moments; the weight factor is moved
by random-block Langevin steps with an Adam-style adaptive drift.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit, log_expit

from .engine import RunTrace, StoppingRule, block_rng, check_stop, subsample_index_matrix
from .errors import InvalidArgument, NumericalFailure

TASKS = ("regression", "classification")
LOG_2PI = math.log(2 * math.pi)


def _check_task(task):
    if task not in TASKS:
        raise InvalidArgument(f"task must be one of {TASKS}, got {task!r}")


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpModel:
    """Fully connected net, tanh hidden units and a single linear output.

    Flat weight layout: for each layer, the ``(out, in)`` weight matrix in
    row-major order followed by its ``out`` biases.
    """

    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidArgument("layer sizes need an input and an output, all >= 1")
        if sizes[-1] != 1:
            raise InvalidArgument("only single-output networks are supported")
        if self.activation != "tanh":
            raise InvalidArgument("the activation is fixed to tanh")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def d_w(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def offsets(self) -> list[tuple[slice, slice, int, int]]:
        out, pos = [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            out.append((slice(pos, pos + o * i), slice(pos + o * i, pos + o * i + o), o, i))
            pos += o * i + o
        return out

    def unflatten(self, w) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(..., d_w)`` -> per layer ``(W (..., out, in), b (..., out))`` views."""
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.d_w:
            raise InvalidArgument(f"weight vector has length {w.shape[-1]}, expected {self.d_w}")
        lead = w.shape[:-1]
        return [(w[..., sw].reshape(lead + (o, i)), w[..., sb]) for sw, sb, o, i in self.offsets()]

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for W, b in layers:
            W = np.asarray(W, dtype=float)
            parts.append(W.reshape(W.shape[:-2] + (-1,)))
            parts.append(np.asarray(b, dtype=float))
        return np.concatenate(parts, axis=-1)


def _inputs(model, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :] if model.sizes[0] > 1 or x.size == 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise InvalidArgument(f"inputs must have {model.sizes[0]} columns")
    return x


def _forward(model, W, x):
    """Batched forward pass. ``W`` is ``(P, d_w)``; returns ``(P, n)`` outputs and hidden activations."""
    acts = [x]
    A = x
    layers = model.unflatten(W)
    P = W.shape[0]
    for k, (Wl, bl) in enumerate(layers):
        if k == 0:
            # shared inputs: one GEMM for all particles
            o = Wl.shape[1]
            Z = (x @ Wl.reshape(P * o, -1).T).reshape(x.shape[0], P, o).transpose(1, 0, 2) + bl[:, None, :]
        else:
            Z = np.matmul(A, np.swapaxes(Wl, -1, -2)) + bl[:, None, :]
        A = np.tanh(Z) if k < model.n_layers - 1 else Z
        if k < model.n_layers - 1:
            acts.append(A)
    return A[..., 0], acts, layers


def mlp_forward(model: MlpModel, w, x) -> np.ndarray:
    """Network output. ``w`` of shape ``(d_w,)`` gives ``(n,)``; ``(P, d_w)`` gives ``(P, n)``."""
    x = _inputs(model, x)
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    out, _, _ = _forward(model, np.atleast_2d(w), x)
    return out[0] if single else out


def _vjp(model, acts, layers, d_out):
    """Gradient of ``sum_i d_out[p, i] * eta(x_i, w_p)`` for each particle ``p``."""
    P = d_out.shape[0]
    grads = [None] * model.n_layers
    delta = d_out[..., None]
    for k in range(model.n_layers - 1, -1, -1):
        A = acts[k]
        if k == 0:
            gW = np.swapaxes(delta, -1, -2).reshape(P * delta.shape[-1], -1) @ A
        else:
            gW = np.matmul(np.swapaxes(delta, -1, -2), A)
        gb = delta.sum(axis=-2)
        grads[k] = (gW.reshape(P, -1), gb)
        if k > 0:
            delta = np.matmul(delta, layers[k][0]) * (1.0 - acts[k] ** 2)
    return np.concatenate([g for pair in grads for g in pair], axis=-1)


def mlp_backward(model: MlpModel, w, x, y, task: str = "regression", noise_prec: float = 1.0) -> np.ndarray:
    """Gradient in ``w`` of the summed data log-likelihood over the rows of ``(x, y)``.

    Regression uses ``-noise_prec/2 * sum (y - eta)^2``; classification the
    Bernoulli log-likelihood with logit ``eta``.
    """
    _check_task(task)
    x = _inputs(model, x)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != x.shape[0]:
        raise InvalidArgument("x and y must have the same number of rows")
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    eta, acts, layers = _forward(model, np.atleast_2d(w), x)
    resid = y - eta if task == "regression" else y - expit(eta)
    if task == "regression":
        resid = noise_prec * resid
    g = _vjp(model, acts, layers, resid)
    return g[0] if single else g


# --------------------------------------------------------------------------
# factors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NnPrior:
    alpha0: float = 1.0
    beta0: float = 0.01

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise InvalidArgument("alpha0 and beta0 must be positive")


@dataclass
class VariationalFactors:
    """``<1/tau_j>`` per weight and, for regression, ``<1/sigma^2>``."""

    inv_tau: np.ndarray
    inv_sigma2: float | None = None

    def __post_init__(self):
        self.inv_tau = np.asarray(self.inv_tau, dtype=float)
        if not np.all(self.inv_tau > 0):
            raise InvalidArgument("<1/tau> must be positive")
        if self.inv_sigma2 is not None and not self.inv_sigma2 > 0:
            raise InvalidArgument("<1/sigma^2> must be positive")


def update_q_tau(cloud, prior: NnPrior) -> np.ndarray:
    W = np.atleast_2d(np.asarray(cloud, dtype=float))
    if not np.all(np.isfinite(W)):
        raise NumericalFailure("non-finite weight particle")
    w2 = np.mean(W * W, axis=0)
    return (prior.alpha0 + 0.5) / (prior.beta0 + 0.5 * w2)


def residual_moment(cloud, model: MlpModel, x, y) -> float:
    """Particle average of the residual sum of squares."""
    eta = mlp_forward(model, np.atleast_2d(cloud), x)
    y = np.asarray(y, dtype=float).reshape(-1)
    return float(np.mean(np.sum((y - eta) ** 2, axis=1)))


def update_q_sigma2_nn(cloud, model: MlpModel, x, y) -> float:
    n = np.asarray(y).size
    ss = residual_moment(cloud, model, x, y)
    if not (ss > 0 and math.isfinite(ss)):
        raise NumericalFailure("residual moment is zero or non-finite; q(sigma^2) is degenerate")
    return (n / 2.0) / (0.5 * ss)


def log_q_w(task: str, w, factors: VariationalFactors, model: MlpModel, x, y, n_total: int | None = None):
    """Unnormalised log density of the optimal weight factor with a rescaled minibatch data term."""
    _check_task(task)
    x = _inputs(model, x)
    y = np.asarray(y, dtype=float).reshape(-1)
    scale = (n_total or y.size) / y.size
    w = np.asarray(w, dtype=float)
    W = np.atleast_2d(w)
    eta = mlp_forward(model, W, x)
    prior = -0.5 * np.sum(factors.inv_tau * W * W, axis=1)
    if task == "regression":
        data = -0.5 * factors.inv_sigma2 * np.sum((y - eta) ** 2, axis=1)
    else:
        data = np.sum(y * eta + log_expit(-eta), axis=1)
    out = prior + scale * data
    return out[0] if w.ndim == 1 else out


def logq_w_grad(task: str, w, factors: VariationalFactors, model: MlpModel, x, y, n_total: int | None = None):
    _check_task(task)
    if task == "regression" and factors.inv_sigma2 is None:
        raise InvalidArgument("regression needs <1/sigma^2>")
    y = np.asarray(y, dtype=float).reshape(-1)
    scale = (n_total or y.size) / y.size
    prec = factors.inv_sigma2 if task == "regression" else 1.0
    data = mlp_backward(model, w, x, y, task, prec)
    return -factors.inv_tau * np.asarray(w, dtype=float) + scale * data


# --------------------------------------------------------------------------
# Algorithm 2 step
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    a: float = 100.0
    lam: float = 1e-8
    h: float = 0.001
    block_fraction: float = 0.10
    clip_norm: float | None = None

    def __post_init__(self):
        if not (0 <= self.beta1 <= 1 and 0 <= self.beta2 <= 1):
            raise InvalidArgument("beta1, beta2 must lie in [0, 1]")
        if not (self.a >= 0 and self.lam >= 0 and self.h >= 0):
            raise InvalidArgument("a, lam and h must be non-negative")
        if not 0 < self.block_fraction <= 1:
            raise InvalidArgument("block_fraction must lie in (0, 1]")

    def block_size(self, d_w: int) -> int:
        return min(d_w, math.ceil(self.block_fraction * d_w - 1e-12))


@dataclass
class AdaptiveDriftState:
    m: np.ndarray
    v: np.ndarray
    cfg: DriftConfig = field(default_factory=DriftConfig)

    @classmethod
    def zeros(cls, d_w: int, cfg: DriftConfig = DriftConfig()) -> "AdaptiveDriftState":
        return cls(np.zeros(d_w), np.zeros(d_w), cfg)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if np.any(self.v < 0):
            raise InvalidArgument("v must be non-negative")

    def drift(self) -> np.ndarray:
        return self.m / np.sqrt(self.v + self.cfg.lam)


GradW = Callable[[np.ndarray], np.ndarray]


def _clip(g, clip_norm):
    if clip_norm is None:
        return g
    norms = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    return g * np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))


def pmfvb_nn_step(cloud, drift: AdaptiveDriftState, grad: GradW,
                  rng: np.random.Generator) -> tuple[np.ndarray, AdaptiveDriftState]:
    """One iteration of the random-block adaptive-drift Langevin update.

    ``grad`` maps a ``(P, d_w)`` matrix of weight vectors to the ``(P, d_w)``
    gradients of the weight factor's log density. Draw order on ``rng``:
    block indices (skipped for a full block), then an ``(M, k)`` noise matrix.
    """
    X = np.asarray(cloud, dtype=float)
    M, d = X.shape
    cfg = drift.cfg
    h = cfg.h
    k = cfg.block_size(d)
    g_t = drift.drift()
    if k == d:
        g = _clip(grad(X), cfg.clip_norm)
        _check_finite(g)
        g_tilde = g + cfg.a * g_t
        noise = rng.standard_normal((M, d))
        new = X + (0.5 * h) * g_tilde + np.sqrt(h) * noise
    else:
        idx = subsample_index_matrix(M, d, k, rng)
        rows = np.arange(M)[:, None]
        points = np.broadcast_to(X.mean(axis=0), (M, d)).copy()
        points[rows, idx] = X[rows, idx]
        g = _clip(grad(points), cfg.clip_norm)
        _check_finite(g)
        g_tilde = g[rows, idx] + cfg.a * g_t[idx]
        noise = rng.standard_normal((M, k))
        new = X.copy()
        new[rows, idx] = X[rows, idx] + (0.5 * h) * g_tilde + np.sqrt(h) * noise
    fresh = grad(new)
    _check_finite(fresh)
    g_bar = fresh.mean(axis=0)
    v_bar = np.sqrt(np.mean((fresh - g_bar) ** 2, axis=0))
    m = cfg.beta1 * drift.m + (1 - cfg.beta1) * g_bar
    v = cfg.beta2 * drift.v + (1 - cfg.beta2) * v_bar
    return new, AdaptiveDriftState(m, v, cfg)


def _check_finite(g):
    bad = ~np.all(np.isfinite(g), axis=1)
    if bad.any():
        raise NumericalFailure("non-finite weight gradient", particle=int(np.flatnonzero(bad)[0]), block="w")


# --------------------------------------------------------------------------
# prediction and scores
# --------------------------------------------------------------------------

def predict(cloud, model: MlpModel, x, task: str = "regression") -> np.ndarray:
    """Network output at the particle-mean weights (probability for classification)."""
    _check_task(task)
    w_hat = np.atleast_2d(np.asarray(cloud, dtype=float)).mean(axis=0)
    eta = mlp_forward(model, w_hat, x)
    return eta if task == "regression" else expit(eta)


def metrics(pred, truth, task: str = "regression", noise_var: float = 1.0) -> dict:
    """Negative mean log predictive density (``pps``) plus ``mse`` or ``mcr``."""
    _check_task(task)
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.size == 0:
        raise InvalidArgument("cannot score an empty dataset")
    if pred.size != truth.size:
        raise InvalidArgument("predictions and truth must align")
    if task == "regression":
        if not noise_var > 0:
            raise InvalidArgument("noise_var must be positive")
        r2 = (truth - pred) ** 2
        pps = float(np.mean(0.5 * (LOG_2PI + math.log(noise_var)) + 0.5 * r2 / noise_var))
        return {"pps": pps, "mse": float(np.mean(r2))}
    with np.errstate(divide="ignore"):
        lp = np.where(truth == 1, np.log(pred), np.log1p(-pred))
    return {"pps": float(-np.mean(lp)), "mcr": float(np.mean((pred >= 0.5) != (truth == 1)))}


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

class NnData(NamedTuple):
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class NnRunConfig:
    n_particles: int = 50
    batch_size: int | None = 500
    max_iters: int = 2000
    seed: int = 0
    init_sd: float = 0.1
    drift: DriftConfig = field(default_factory=DriftConfig)

    def __post_init__(self):
        if self.n_particles < 1 or self.max_iters < 0:
            raise InvalidArgument("need n_particles >= 1 and max_iters >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not self.init_sd > 0:
            raise InvalidArgument("init_sd must be positive")


class NnResult(NamedTuple):
    cloud: np.ndarray
    factors: VariationalFactors
    trace: RunTrace
    drift: AdaptiveDriftState
    best_cloud: np.ndarray
    best_factors: VariationalFactors


def validation_score(cloud, factors: VariationalFactors, model: MlpModel, val: NnData, task: str) -> float:
    pred = predict(cloud, model, val.x, task)
    noise_var = 1.0 / factors.inv_sigma2 if task == "regression" else 1.0
    return metrics(pred, val.y, task, noise_var)["pps"]


def run_pmfvb_nn(task: str, model: MlpModel, train: NnData, val: NnData, prior: NnPrior = NnPrior(),
                 cfg: NnRunConfig = NnRunConfig(), rule: StoppingRule | None = None,
                 callback=None) -> NnResult:
    """Algorithm-2 loop with validation-PPS early stopping.

    Per iteration: a minibatch is drawn, ``q(tau)`` (and ``q(sigma^2)`` from the
    minibatch residuals) is refreshed, then one :func:`pmfvb_nn_step`. The
    trace's ``lower_bound`` column holds the particle average of the
    minibatch-rescaled log weight factor plus ``log M``; ``val_score`` is the
    validation PPS. ``best_cloud`` is the cloud at the best validation score.
    """
    _check_task(task)
    x, y = _inputs(model, train.x), np.asarray(train.y, dtype=float).reshape(-1)
    if x.shape[0] == 0 or np.asarray(val.y).size == 0:
        raise InvalidArgument("train and validation splits must be non-empty")
    n = x.shape[0]
    rule = rule or StoppingRule("validation-patience", window=1, patience=100)
    M = cfg.n_particles
    b = n if cfg.batch_size is None else min(cfg.batch_size, n)
    init_rng = np.random.default_rng([cfg.seed, 0, 1])
    W = cfg.init_sd * init_rng.standard_normal((M, model.d_w))
    drift = AdaptiveDriftState.zeros(model.d_w, cfg.drift)
    trace = RunTrace(window=rule.window)
    factors = VariationalFactors(update_q_tau(W, prior), None)
    best, best_factors, best_score = W, factors, math.inf
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        rng = block_rng(cfg.seed, it, 0)
        rows = np.arange(n) if b == n else np.sort(rng.choice(n, size=b, replace=False))
        xb, yb = x[rows], y[rows]
        inv_tau = update_q_tau(W, prior)
        inv_s2 = update_q_sigma2_nn(W, model, xb, yb) if task == "regression" else None
        factors = VariationalFactors(inv_tau, inv_s2)

        def grad(P, factors=factors, xb=xb, yb=yb):
            return logq_w_grad(task, P, factors, model, xb, yb, n)

        W, drift = pmfvb_nn_step(W, drift, grad, rng)
        lb = float(np.mean(log_q_w(task, W, factors, model, xb, yb, n))) + math.log(M)
        score = validation_score(W, factors, model, val, task)
        if score < best_score:
            best, best_factors, best_score = W, factors, score
        trace.append(it, lb, score, (time.perf_counter() - t0) * 1e3)
        if callback is not None:
            callback(it, W, factors)
        if check_stop(trace, rule):
            break
    else:
        trace.truncated = True
    return NnResult(W, factors, trace, drift, best, best_factors)
