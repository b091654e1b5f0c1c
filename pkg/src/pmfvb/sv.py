"""Stochastic volatility model with a q(mu) q(sigma^2) q(phi, x) factorization.

``q(mu)`` is Gaussian and ``q(sigma^2)`` Inverse-Gamma, both refreshed in
closed form from the (phi, x) particles; the (phi, x_1..x_T) block is moved
by Langevin steps on the log of its optimal factor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betaln, gammaln

from . import _svkernels as K
from .engine import Block, FactorizedTarget, LmcConfig, ParticleCloud, RunTrace, StoppingRule, run_pmfvb
from .errors import DomainError, InvalidArgument, NumericalFailure

LOG_2PI = float(np.log(2 * np.pi))
PHI_MARGIN = 1e-4
# average curvature of the observation term -log p(y_t | x_t) in x_t
OBS_CURVATURE = 0.5


@dataclass(frozen=True)
class SvData:
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if y.size < 2:
            raise InvalidArgument("need at least two observations")
        if not np.all(np.isfinite(y)):
            raise InvalidArgument("returns must be finite")
        object.__setattr__(self, "y", y)

    @property
    def T(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class SvPriors:
    """mu ~ N(0, sigma0_sq); (1 + phi)/2 ~ Beta(a0, b0); sigma^2 ~ IG(alpha0, beta0)."""

    sigma0_sq: float = 10.0
    a0: float = 20.0
    b0: float = 1.5
    alpha0: float = 2.5
    beta0: float = 0.025

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise InvalidArgument(f"prior hyperparameter {name} must be positive")


@dataclass
class SvVariationalState:
    mu_q: float
    sigma_q2: float
    alpha: float
    beta: float
    cloud: ParticleCloud

    @property
    def phi(self) -> np.ndarray:
        return self.cloud.values[:, 0]

    @property
    def x(self) -> np.ndarray:
        return self.cloud.values[:, 1:]

    def sigma2_mean(self) -> float:
        return self.beta / (self.alpha - 1.0)

    def sigma2_var(self) -> float:
        return self.beta ** 2 / ((self.alpha - 1.0) ** 2 * (self.alpha - 2.0))

    def summary(self, quantiles=(0.05, 0.5, 0.95)) -> dict:
        q = [float(v) for v in quantiles]
        return {
            "mu_q": self.mu_q,
            "sigma_q2": self.sigma_q2,
            "alpha_sigma2": self.alpha,
            "beta_sigma2": self.beta,
            "n_particles": self.cloud.n_particles,
            "phi_mean": float(self.phi.mean()),
            "phi_quantiles": dict(zip(map(str, q), np.quantile(self.phi, q).tolist())),
            "x_mean_quantiles": dict(zip(map(str, q), np.quantile(self.x.mean(axis=0), q).tolist())),
        }


def _phi_x(phi, x):
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != phi.shape[0]:
        raise InvalidArgument("phi and x must have one row per particle")
    return phi, x


# --------------------------------------------------------------------------
# analytic factors
# --------------------------------------------------------------------------

def update_q_mu(phi, x, alpha, beta, priors: SvPriors, variant: str = "corrected") -> tuple[float, float]:
    """Gaussian factor for mu: returns ``(mean, variance)`` = ``(B/A, 1/A)``.

    ``variant="paper"`` multiplies the transition part of ``B`` by an extra
    ``T - 1``; ``"corrected"`` omits it, which is what completing the square
    in the expected log joint gives.
    """
    phi, x = _phi_x(phi, x)
    T = x.shape[1]
    r = alpha / beta
    m1, m2, m3, trans = K.q_mu_moments(np.column_stack([phi, x]))
    A = 1.0 / priors.sigma0_sq + r * m1 + (T - 1) * r * m2
    if variant == "corrected":
        B = r * m3 + r * trans
    elif variant == "paper":
        B = r * m3 + (T - 1) * r * trans
    else:
        raise InvalidArgument(f"unknown q(mu) variant {variant!r}")
    if not (np.isfinite(A) and A > 0 and np.isfinite(B)):
        raise NumericalFailure("q(mu) precision is not positive and finite", block="mu")
    return float(B / A), float(1.0 / A)


def update_q_sigma2(phi, x, mu_q, sigma_q2, priors: SvPriors) -> tuple[float, float]:
    """Inverse-Gamma factor for sigma^2: returns ``(shape, rate)``."""
    phi, x = _phi_x(phi, x)
    T = x.shape[1]
    beta = priors.beta0 + 0.5 * K.q_sigma2_moment(np.column_stack([phi, x]), float(mu_q), float(sigma_q2))
    return float(priors.alpha0 + T / 2.0), float(beta)


# --------------------------------------------------------------------------
# q(phi, x)
# --------------------------------------------------------------------------

def _check_phi(phi):
    if np.any(np.abs(phi) >= 1):
        raise DomainError("phi must lie strictly inside (-1, 1)")


def log_q_phi_x(phi, x, mu_q, sigma_q2, alpha, beta, data: SvData, priors: SvPriors):
    """Unnormalised log density of the optimal (phi, x) factor, one value per row."""
    phi, x = _phi_x(phi, x)
    _check_phi(phi)
    r = alpha / beta
    p = phi[:, None]
    y2 = data.y ** 2
    out = ((priors.a0 - 1) * np.log1p(phi) + (priors.b0 - 1) * np.log1p(-phi) + 0.5 * np.log1p(-phi ** 2)
           - 0.5 * r * (1 - phi ** 2) * ((x[:, 0] - mu_q) ** 2 + sigma_q2))
    resid = x[:, 1:] - mu_q * (1 - p) - p * x[:, :-1]
    out = out - 0.5 * r * np.sum(resid ** 2 + (1 - p) ** 2 * sigma_q2, axis=1)
    out = out - np.sum(0.5 * x + 0.5 * y2 * np.exp(-x), axis=1)
    return out


def grad_phi_logq(phi, x, mu_q, sigma_q2, alpha, beta, priors: SvPriors):
    phi, x = _phi_x(phi, x)
    _check_phi(phi)
    r = alpha / beta
    c = x - mu_q
    g = ((priors.a0 - 1) / (1 + phi) - (priors.b0 - 1) / (1 - phi) - phi / (1 - phi ** 2)
         + phi * r * (c[:, 0] ** 2 + sigma_q2))
    g = g + r * np.sum(c[:, :-1] * c[:, 1:] - phi[:, None] * c[:, :-1] ** 2 + (1 - phi[:, None]) * sigma_q2, axis=1)
    return g


def grad_x_logq(phi, x, mu_q, sigma_q2, alpha, beta, data: SvData):
    phi, x = _phi_x(phi, x)
    _check_phi(phi)
    r = alpha / beta
    p = phi[:, None]
    # e[:, t-1] is the AR residual of x_t for t = 2..T
    e = x[:, 1:] - (1 - p) * mu_q - p * x[:, :-1]
    g = -0.5 + 0.5 * data.y ** 2 * np.exp(-x)
    g = g + np.zeros_like(x)
    g[:, 0] += -r * (1 - phi ** 2) * (x[:, 0] - mu_q)
    g[:, 1:] -= r * e
    g[:, :-1] += p * r * e
    return g


def reflect_phi(phi, margin: float = PHI_MARGIN):
    """Fold values back into ``[-1 + margin, 1 - margin]`` by mirror reflection."""
    lo, hi = -1.0 + margin, 1.0 - margin
    span = hi - lo
    u = np.mod(np.asarray(phi, dtype=float) - lo, 2 * span)
    return lo + (span - np.abs(u - span))


# --------------------------------------------------------------------------
# full joint (lower bound, MALA oracle)
# --------------------------------------------------------------------------

def sv_log_joint(mu, phi, sigma2, x, data: SvData, priors: SvPriors):
    """log p(y, x, mu, phi, sigma^2) including all normalising constants."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    phi, x = _phi_x(phi, x)
    s2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    T = x.shape[1]
    out = np.full(phi.shape, -np.inf)
    ok = (np.abs(phi) < 1) & (s2 > 0)
    if not ok.any():
        return out
    mu, ph, s2, xx = mu[ok], phi[ok], s2[ok], x[ok]
    lp = -0.5 * (LOG_2PI + np.log(priors.sigma0_sq)) - 0.5 * mu ** 2 / priors.sigma0_sq
    lp += ((priors.a0 - 1) * np.log1p(ph) + (priors.b0 - 1) * np.log1p(-ph)
           - (priors.a0 + priors.b0 - 1) * np.log(2.0) - betaln(priors.a0, priors.b0))
    lp += priors.alpha0 * np.log(priors.beta0) - gammaln(priors.alpha0) - (priors.alpha0 + 1) * np.log(s2) - priors.beta0 / s2
    e1 = xx[:, 0] - mu
    lp += -0.5 * (LOG_2PI + np.log(s2) - np.log1p(-ph ** 2)) - 0.5 * (1 - ph ** 2) * e1 ** 2 / s2
    r = xx[:, 1:] - mu[:, None] - ph[:, None] * (xx[:, :-1] - mu[:, None])
    lp += -0.5 * (T - 1) * (LOG_2PI + np.log(s2)) - 0.5 * np.sum(r ** 2, axis=1) / s2
    lp += np.sum(-0.5 * LOG_2PI - 0.5 * xx - 0.5 * data.y ** 2 * np.exp(-xx), axis=1)
    out[ok] = lp
    return out


def sv_log_joint_grad(mu, phi, sigma2, x, data: SvData, priors: SvPriors):
    """Gradient of :func:`sv_log_joint` as ``(d_mu, d_phi, d_sigma2, d_x)``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    phi, x = _phi_x(phi, x)
    s2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    _check_phi(phi)
    T = x.shape[1]
    e1 = x[:, 0] - mu
    c = x - mu[:, None]
    r = c[:, 1:] - phi[:, None] * c[:, :-1]
    d_mu = -mu / priors.sigma0_sq + (1 - phi ** 2) * e1 / s2 + (1 - phi) * np.sum(r, axis=1) / s2
    d_phi = ((priors.a0 - 1) / (1 + phi) - (priors.b0 - 1) / (1 - phi) - phi / (1 - phi ** 2)
             + phi * e1 ** 2 / s2 + np.sum(r * c[:, :-1], axis=1) / s2)
    ss = (1 - phi ** 2) * e1 ** 2 + np.sum(r ** 2, axis=1)
    d_s2 = -(priors.alpha0 + 1) / s2 + priors.beta0 / s2 ** 2 - 0.5 * T / s2 + 0.5 * ss / s2 ** 2
    d_x = -0.5 + 0.5 * data.y ** 2 * np.exp(-x) + np.zeros_like(x)
    d_x[:, 0] -= (1 - phi ** 2) * e1 / s2
    d_x[:, 1:] -= r / s2[:, None]
    d_x[:, :-1] += phi[:, None] * r / s2[:, None]
    return d_mu, d_phi, d_s2, d_x


class SvUnconstrained:
    """Flat parameterisation ``(mu, atanh(phi), log(sigma^2), x_1..x_T)`` with log-Jacobian."""

    def __init__(self, data: SvData, priors: SvPriors = SvPriors()):
        self.data = data
        self.priors = priors
        self.dim = data.T + 3

    @staticmethod
    def to_constrained(z):
        z = np.atleast_2d(z)
        return z[:, 0], np.tanh(z[:, 1]), np.exp(z[:, 2]), z[:, 3:]

    @staticmethod
    def to_unconstrained(mu, phi, sigma2, x):
        return np.column_stack([mu, np.arctanh(phi), np.log(sigma2), np.atleast_2d(x)])

    def log_density(self, z):
        z = np.atleast_2d(z)
        mu, phi, s2, x = self.to_constrained(z)
        # log|d phi/dz| = log(1 - tanh^2 z) written stably; log|d s2/ds| = s
        log_jac = 2 * (np.log(2.0) - np.abs(z[:, 1]) - np.log1p(np.exp(-2 * np.abs(z[:, 1])))) + z[:, 2]
        return sv_log_joint(mu, phi, s2, x, self.data, self.priors) + log_jac

    def grad(self, z):
        z = np.atleast_2d(z)
        mu, phi, s2, x = self.to_constrained(z)
        d_mu, d_phi, d_s2, d_x = sv_log_joint_grad(mu, phi, s2, x, self.data, self.priors)
        return np.column_stack([d_mu, d_phi * (1 - phi ** 2) - 2 * phi, d_s2 * s2 + 1, d_x])


# --------------------------------------------------------------------------
# preconditioning
# --------------------------------------------------------------------------

class SvPreconditioner:
    """Inverse-curvature preconditioner for the ``(phi, x)`` block.

    ``x`` gets ``Q^-1`` with ``Q = (alpha/beta) R(phi_bar) + c I``, where
    ``R`` is the tridiagonal AR(1) precision pattern and ``c`` the average
    observation curvature; ``phi`` gets the reciprocal of its expected
    conditional curvature. Both are frozen for one Langevin step.
    """

    def __init__(self, phi_scale: float, r: float, phi_bar: float, T: int, c: float = OBS_CURVATURE):
        if not (phi_scale > 0 and r > 0 and c > 0):
            raise InvalidArgument("preconditioner parameters must be positive")
        self.phi_scale = float(phi_scale)
        diag = np.full(T, r * (1 + phi_bar ** 2) + c)
        diag[0] = diag[-1] = r + c
        self._d, self._u = K.bidiag_factor(diag, np.full(T - 1, -r * phi_bar))

    def apply(self, G):
        out = np.empty_like(G)
        out[:, 0] = self.phi_scale * G[:, 0]
        out[:, 1:] = K.bidiag_solve_cols(self._d, self._u, np.ascontiguousarray(G[:, 1:].T), True).T
        return out

    def sqrt_apply(self, N):
        out = np.empty_like(N)
        out[:, 0] = np.sqrt(self.phi_scale) * N[:, 0]
        # Q = U'U, so U^-1 N has covariance Q^-1
        out[:, 1:] = K.bidiag_solve_cols(self._d, self._u, np.ascontiguousarray(N[:, 1:].T), False).T
        return out


def sv_preconditioner(cloud_values, mu_q, sigma_q2, alpha, beta, priors: SvPriors) -> SvPreconditioner:
    phi, x = cloud_values[:, 0], cloud_values[:, 1:]
    T = x.shape[1]
    r = alpha / beta
    phi_bar = float(np.clip(phi.mean(), -1 + PHI_MARGIN, 1 - PHI_MARGIN))
    c = x[:, :-1] - mu_q
    curv_phi = (r * (np.mean(np.sum(c * c, axis=1)) + (T - 1) * sigma_q2)
                + (priors.a0 - 1) / (1 + phi_bar) ** 2 + (priors.b0 - 1) / (1 - phi_bar) ** 2 + 1.0)
    return SvPreconditioner(1.0 / curv_phi, r, phi_bar, T)


# --------------------------------------------------------------------------
# engine wiring
# --------------------------------------------------------------------------

class SvTarget(FactorizedTarget):
    """Blocks in update order: ``mu`` and ``sigma2`` (analytic), then ``phi_x`` (LMC)."""

    def __init__(self, data: SvData, priors: SvPriors = SvPriors(), mu_variant: str = "corrected",
                 precondition: bool = True):
        self.data = data
        self.priors = priors
        self.mu_variant = mu_variant
        self.precondition = bool(precondition)
        self._y2 = data.y ** 2
        p = priors
        self._consts = (p.sigma0_sq, p.a0, p.b0, p.alpha0, p.beta0, float(betaln(p.a0, p.b0)), float(gammaln(p.alpha0)))
        self.blocks = (Block("mu", 1, "analytic"), Block("sigma2", 1, "analytic"), Block("phi_x", data.T + 1))

    def initial_factors(self):
        p = self.priors
        return {"mu": {"mean": 0.0, "var": p.sigma0_sq}, "sigma2": {"alpha": p.alpha0, "beta": p.beta0}}

    def analytic_update(self, name, clouds, factors):
        v = clouds["phi_x"].values
        phi, x = v[:, 0], v[:, 1:]
        if name == "mu":
            s = factors["sigma2"]
            m, var = update_q_mu(phi, x, s["alpha"], s["beta"], self.priors, self.mu_variant)
            return {"mean": m, "var": var}
        if name == "sigma2":
            q = factors["mu"]
            a, b = update_q_sigma2(phi, x, q["mean"], q["var"], self.priors)
            return {"alpha": a, "beta": b}
        return super().analytic_update(name, clouds, factors)

    def sample_factor(self, name, params, n, rng):
        if name == "mu":
            return rng.normal(params["mean"], np.sqrt(params["var"]), size=(n, 1))
        if name == "sigma2":
            return params["beta"] / rng.gamma(params["alpha"], 1.0, size=(n, 1))
        return super().sample_factor(name, params, n, rng)

    def block_grad(self, name, own, others, factors):
        q, s = factors["mu"], factors["sigma2"]
        if np.any(np.abs(own[:, 0]) >= 1):
            raise DomainError("phi must lie strictly inside (-1, 1)")
        return K.grad_phi_x(np.ascontiguousarray(own), float(q["mean"]), float(q["var"]),
                            s["alpha"] / s["beta"], self.priors.a0, self.priors.b0, self._y2)

    def preconditioner(self, name, clouds, factors):
        if not self.precondition:
            return None
        q, s = factors["mu"], factors["sigma2"]
        return sv_preconditioner(clouds[name].values, q["mean"], q["var"], s["alpha"], s["beta"], self.priors)

    def constrain(self, name, values):
        values = values.copy()
        values[:, 0] = reflect_phi(values[:, 0])
        return values

    def log_joint(self, theta):
        """Rows are ``(mu, sigma2, phi, x_1..x_T)``."""
        return K.sv_log_joint_rows(np.ascontiguousarray(theta, dtype=float), self._y2, *self._consts)

    def initial_cloud(self, n: int, rng: np.random.Generator) -> np.ndarray:
        phi = 2 * rng.beta(self.priors.a0, self.priors.b0, size=n) - 1
        x = rng.standard_normal((n, self.data.T))
        return np.column_stack([reflect_phi(phi), x])


def run_pmfvb_sv(data: SvData, priors: SvPriors, cfg: LmcConfig, rule: StoppingRule | None = None,
                 n_particles: int = 500, mu_variant: str = "corrected",
                 precondition: bool = True, callback=None) -> tuple[SvVariationalState, RunTrace]:
    """PMFVB for the SV model.

    With ``precondition`` (default) the step size is in curvature-normalised
    units (0.05 to 0.2 works); without it, it is a raw Langevin step.
    """
    target = SvTarget(data, priors, mu_variant, precondition)
    res = run_pmfvb(target, {"phi_x": target.initial_cloud}, cfg, rule, n_particles=n_particles,
                    callback=callback)
    q, s = res.factors["mu"], res.factors["sigma2"]
    state = SvVariationalState(q["mean"], q["var"], s["alpha"], s["beta"], res.clouds["phi_x"])
    return state, res.trace


def generate_sv_data(T: int, mu: float, phi: float, sigma: float, seed) -> SvData:
    if abs(phi) >= 1:
        raise InvalidArgument("phi must satisfy |phi| < 1")
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    if T < 2:
        raise InvalidArgument("T must be >= 2")
    rng = np.random.default_rng(seed)
    x = np.empty(T)
    x[0] = rng.normal(mu, sigma / np.sqrt(1 - phi ** 2))
    eps = rng.standard_normal(T)
    for t in range(1, T):
        x[t] = mu * (1 - phi) + phi * x[t - 1] + sigma * eps[t]
    y = np.exp(0.5 * x) * rng.standard_normal(T)
    return SvData(y)
