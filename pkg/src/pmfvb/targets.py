"""Concrete factorized targets: Bayesian logistic regression and a Gaussian toy.

The Gaussian toy has a closed-form mean-field optimum, which makes it the
reference problem for checking the particle engine end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .engine import Block, FactorizedTarget
from .errors import InvalidArgument


# --------------------------------------------------------------------------
# Gaussian toy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianToy:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mu.size, mu.size):
            raise InvalidArgument(f"covariance must be {mu.size}x{mu.size}")
        if not np.allclose(cov, cov.T):
            raise InvalidArgument("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvalidArgument("covariance must be positive definite") from None
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


def gaussian_toy_mean_field_optimum(toy: GaussianToy) -> list[tuple[float, float]]:
    """Per-coordinate ``(mean, variance)`` of the mean-field optimum.

    Coordinate ``k`` of the optimal product approximation to ``N(mu, Sigma)``
    is ``N(mu_k, 1 / Lambda_kk)`` with ``Lambda = Sigma^{-1}``.
    """
    if not isinstance(toy, GaussianToy):
        toy = GaussianToy(*toy)
    lam = toy.precision
    return [(float(toy.mean[k]), float(1.0 / lam[k, k])) for k in range(toy.mean.size)]


class GaussianToyTarget(FactorizedTarget):
    """One scalar LMC block per coordinate, named ``x0``, ``x1``, ..."""

    def __init__(self, toy: GaussianToy):
        self.toy = toy
        self.lam = toy.precision
        self.blocks = tuple(Block(f"x{k}", 1) for k in range(toy.mean.size))
        self._index = {b.name: k for k, b in enumerate(self.blocks)}

    def log_joint(self, theta):
        z = np.atleast_2d(theta) - self.toy.mean
        return -0.5 * np.einsum("ni,ij,nj->n", z, self.lam, z)

    def block_grad(self, name, own, others, factors=None):
        k = self._index[name]
        mu = self.toy.mean
        g = self.lam[k, k] * (own - mu[k])
        for other, vals in others.items():
            j = self._index[other]
            g = g + self.lam[k, j] * (vals - mu[j])
        return -g


# --------------------------------------------------------------------------
# logistic regression
# --------------------------------------------------------------------------

def _default_split(d: int) -> tuple[np.ndarray, np.ndarray]:
    half = d // 2
    return np.arange(half), np.arange(half, d)


@dataclass(frozen=True)
class LogisticModel:
    """Design matrix (first column ones), binary responses and prior variance.

    ``blocks`` partitions the coefficient indices; the default splits them
    into a first and second half, which is ``(b0, b1) | (b2, b3)`` for d = 4.
    """

    X: np.ndarray
    y: np.ndarray
    prior_var: float = 4.0
    blocks: tuple = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise InvalidArgument("X must be n x d with one response per row")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidArgument("responses must be 0 or 1")
        if not self.prior_var > 0:
            raise InvalidArgument("prior_var must be positive")
        blocks = self.blocks if self.blocks is not None else _default_split(X.shape[1])
        blocks = tuple(np.asarray(b, dtype=int).reshape(-1) for b in blocks)
        joined = np.sort(np.concatenate(blocks))
        if not np.array_equal(joined, np.arange(X.shape[1])) or any(b.size == 0 for b in blocks):
            raise InvalidArgument("blocks must partition the coefficient indices")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def assemble(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        """Scatter per-block coefficient arrays back into full ``beta`` rows."""
        parts = [np.atleast_2d(p) for p in parts]
        beta = np.empty((parts[0].shape[0], self.d))
        for idx, p in zip(self.blocks, parts):
            beta[:, idx] = p
        return beta


def _softplus(eta):
    return -log_expit(-eta)


def logistic_log_unnorm_posterior(beta, model: LogisticModel):
    """Log prior plus log likelihood; vectorised over rows of ``beta``."""
    b = np.asarray(beta, dtype=float)
    single = b.ndim == 1
    b = np.atleast_2d(b)
    eta = b @ model.X.T
    ll = eta @ model.y - _softplus(eta).sum(axis=1)
    out = ll - 0.5 * np.sum(b * b, axis=1) / model.prior_var
    return float(out[0]) if single else out


def _logistic_grad_parts(k: int, parts: Sequence[np.ndarray], model: LogisticModel) -> np.ndarray:
    eta = sum(np.atleast_2d(p) @ model.X[:, idx].T for idx, p in zip(model.blocks, parts))
    resid = model.y - expit(eta)
    return resid @ model.X[:, model.blocks[k]] - np.atleast_2d(parts[k]) / model.prior_var


def logistic_block_grad(block: int, theta1, theta2, model: LogisticModel):
    """Gradient of the log posterior w.r.t. block 1 or 2 (two-block split)."""
    if block not in (1, 2):
        raise InvalidArgument("block must be 1 or 2")
    if len(model.blocks) != 2:
        raise InvalidArgument("logistic_block_grad expects a two-block model")
    single = np.ndim(theta1) == 1
    g = _logistic_grad_parts(block - 1, [theta1, theta2], model)
    return g[0] if single else g


def logistic_full_grad(beta, model: LogisticModel):
    b = np.atleast_2d(np.asarray(beta, dtype=float))
    g = (model.y - expit(b @ model.X.T)) @ model.X - b / model.prior_var
    return g[0] if np.ndim(beta) == 1 else g


class LogisticTarget(FactorizedTarget):
    """Block names are ``theta1``, ``theta2``, ... in the order of ``model.blocks``."""

    def __init__(self, model: LogisticModel):
        self.model = model
        self.blocks = tuple(Block(f"theta{k + 1}", idx.size) for k, idx in enumerate(model.blocks))

    def log_joint(self, theta):
        # theta columns follow block order, not coefficient order
        parts = self.split(theta)
        beta = self.model.assemble([parts[b.name] for b in self.blocks])
        return logistic_log_unnorm_posterior(beta, self.model)

    def block_grad(self, name, own, others, factors=None):
        k = [b.name for b in self.blocks].index(name)
        parts = [own if b.name == name else others[b.name] for b in self.blocks]
        return _logistic_grad_parts(k, parts, self.model)


def generate_logistic_data(n: int, d: int, prior_var: float, seed, beta=None) -> tuple[LogisticModel, np.ndarray]:
    """Simulate ``(model, beta_true)``: intercept plus ``d - 1`` standard-normal covariates.

    ``beta`` fixes the true coefficients instead of drawing them from the prior.
    """
    if n < 1 or d < 2:
        raise InvalidArgument("need n >= 1 and d >= 2")
    if not prior_var > 0:
        raise InvalidArgument("prior_var must be positive")
    rng = np.random.default_rng(seed)
    drawn = rng.normal(0.0, np.sqrt(prior_var), size=d)
    beta_true = drawn if beta is None else np.asarray(beta, dtype=float).reshape(d)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    y = rng.binomial(1, expit(X @ beta_true)).astype(float)
    return LogisticModel(X, y, prior_var), beta_true
