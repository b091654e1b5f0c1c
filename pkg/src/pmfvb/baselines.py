"""SGLD-family training of the Bayesian MLP on the joint ``(w, tau, sigma^2)``.

The baselines sample all parameters in unconstrained space, ``s_j = log tau_j``
and ``l = log sigma^2``, so the chain dimension is ``2 d_w`` (+1 for
regression). Predictions use the running mean of the post-burn-in weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_expit

from .engine import RunTrace, StoppingRule, block_rng, check_stop
from .errors import InvalidArgument
from .nn import (
    MlpModel,
    NnData,
    NnPrior,
    _check_task,
    _inputs,
    metrics,
    mlp_backward,
    mlp_forward,
)
from .samplers import AdamSgldConfig, PsgldConfig, SamplerState, adam_sgld_step, psgld_step, sgld_step

METHODS = ("sgld", "psgld", "adam-sgld")


class BnnJointTarget:
    """Unconstrained log posterior of the MLP with the adaptive ridge prior.

    Layout ``z = (w, log tau, [log sigma^2])``. The Jacobians of the log maps are
    included; the scale-invariant ``1/sigma^2`` prior cancels its own Jacobian.
    The data term can be evaluated on a row subset and rescaled to ``n``.
    """

    def __init__(self, task: str, model: MlpModel, data: NnData, prior: NnPrior = NnPrior()):
        _check_task(task)
        self.task, self.model, self.prior = task, model, prior
        self.x = _inputs(model, data.x)
        self.y = np.asarray(data.y, dtype=float).reshape(-1)
        if self.y.size != self.x.shape[0] or self.y.size == 0:
            raise InvalidArgument("x and y must be non-empty and aligned")
        self.n = self.y.size

    @property
    def dim(self) -> int:
        return 2 * self.model.d_w + (self.task == "regression")

    def split(self, z):
        z = np.asarray(z, dtype=float)
        d = self.model.d_w
        w, s = z[..., :d], z[..., d:2 * d]
        ell = z[..., 2 * d] if self.task == "regression" else None
        return w, s, ell

    def _batch(self, rows):
        if rows is None:
            return self.x, self.y, 1.0
        return self.x[rows], self.y[rows], self.n / len(rows)

    def log_density(self, z, rows=None):
        w, s, ell = self.split(z)
        x, y, scale = self._batch(rows)
        a0, b0 = self.prior.alpha0, self.prior.beta0
        lp = np.sum(-(a0 + 0.5) * s - (b0 + 0.5 * w * w) * np.exp(-s), axis=-1)
        eta = mlp_forward(self.model, w, x)
        if self.task == "regression":
            rss = np.sum((y - eta) ** 2, axis=-1)
            lp = lp + scale * (-0.5 * len(y) * ell - 0.5 * np.exp(-ell) * rss)
        else:
            lp = lp + scale * np.sum(y * eta + log_expit(-eta), axis=-1)
        return lp

    def grad(self, z, rows=None):
        w, s, ell = self.split(z)
        x, y, scale = self._batch(rows)
        a0, b0 = self.prior.alpha0, self.prior.beta0
        inv_tau = np.exp(-s)
        if self.task == "regression":
            prec = np.exp(-ell)
            eta = mlp_forward(self.model, w, x)
            rss = np.sum((y - eta) ** 2, axis=-1)
            gw = scale * _backward(self.model, w, x, y, "regression", prec)
            g_ell = scale * (-0.5 * len(y) + 0.5 * prec * rss)
        else:
            gw = scale * _backward(self.model, w, x, y, "classification", 1.0)
        gw = gw - inv_tau * w
        gs = -(a0 + 0.5) + (b0 + 0.5 * w * w) * inv_tau
        parts = [gw, gs]
        if self.task == "regression":
            parts.append(np.asarray(g_ell)[..., None])
        return np.concatenate(parts, axis=-1)


def _backward(model, w, x, y, task, prec):
    # mlp_backward takes a scalar precision; batched z carries one per row
    prec = np.asarray(prec, dtype=float)
    if prec.ndim == 0:
        return mlp_backward(model, w, x, y, task, float(prec))
    return mlp_backward(model, w, x, y, task, 1.0) * prec[:, None]


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "sgld"
    step_size: float = 1e-5
    batch_size: int | None = 500
    max_iters: int = 2000
    burn_in: int = 200
    seed: int = 0
    init_sd: float = 0.1
    psgld: PsgldConfig = field(default_factory=PsgldConfig)
    adam: AdamSgldConfig = field(default_factory=AdamSgldConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"method must be one of {METHODS}, got {self.method!r}")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise InvalidArgument("step_size must be positive")
        if self.max_iters < 0 or self.burn_in < 0:
            raise InvalidArgument("max_iters and burn_in must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")


class BaselineResult(NamedTuple):
    state: SamplerState
    trace: RunTrace
    w_mean: np.ndarray
    noise_var: float
    best_w_mean: np.ndarray
    best_noise_var: float


def baseline_predict(w_mean, model: MlpModel, x, task: str) -> np.ndarray:
    eta = mlp_forward(model, w_mean, x)
    return eta if task == "regression" else expit(eta)


def run_baseline_nn(task: str, model: MlpModel, train: NnData, val: NnData, prior: NnPrior = NnPrior(),
                    cfg: BaselineConfig = BaselineConfig(), rule: StoppingRule | None = None,
                    callback=None) -> BaselineResult:
    """One SGLD-family chain on the joint posterior with validation-PPS early stopping.

    Until ``burn_in`` the estimate is the current draw; afterwards it is the
    running mean of the weights (and of ``exp(-l)`` for the noise precision).
    The trace's ``lower_bound`` column holds the minibatch log density.
    """
    target = BnnJointTarget(task, model, train, prior)
    n = target.n
    b = n if cfg.batch_size is None else min(cfg.batch_size, n)
    rule = rule or StoppingRule("validation-patience", window=1, patience=100)
    init_rng = np.random.default_rng([cfg.seed, 0, 1])
    d = model.d_w
    z0 = np.zeros(target.dim)
    z0[:d] = cfg.init_sd * init_rng.standard_normal(d)
    state = SamplerState(z0)
    trace = RunTrace(window=rule.window)
    w_sum, prec_sum, n_avg = np.zeros(d), 0.0, 0
    w_mean, noise_var = z0[:d].copy(), 1.0
    best = (w_mean, noise_var, math.inf)
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        rng = block_rng(cfg.seed, it, 0)
        rows = None if b == n else np.sort(rng.choice(n, size=b, replace=False))
        g = target.grad(state.theta, rows)
        if cfg.method == "sgld":
            state = SamplerState(sgld_step(state.theta, g, cfg.step_size, rng))
        elif cfg.method == "psgld":
            state = psgld_step(state, g, cfg.step_size, rng, cfg.psgld)
        else:
            state = adam_sgld_step(state, g, cfg.step_size, rng, cfg.adam)
        w, _, ell = target.split(state.theta)
        prec = math.exp(-ell) if task == "regression" else 1.0
        if it > cfg.burn_in:
            w_sum += w
            prec_sum += prec
            n_avg += 1
            w_mean, noise_var = w_sum / n_avg, n_avg / prec_sum
        else:
            w_mean, noise_var = w.copy(), 1.0 / prec
        pred = baseline_predict(w_mean, model, val.x, task)
        score = metrics(pred, val.y, task, noise_var)["pps"]
        if score < best[2]:
            best = (w_mean.copy(), noise_var, score)
        lp = float(target.log_density(state.theta, rows))
        trace.append(it, lp, score, (time.perf_counter() - t0) * 1e3)
        if callback is not None:
            callback(it, state)
        if check_stop(trace, rule):
            break
    else:
        trace.truncated = True
    return BaselineResult(state, trace, w_mean, noise_var, best[0], best[1])
