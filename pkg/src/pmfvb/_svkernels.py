"""Fused loops for the SV hot path.

The numpy functions in :mod:`pmfvb.sv` are the reference implementations;
these kernels compute the same quantities in one pass per particle and are
checked against them in the tests.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2 * math.pi)


@njit(cache=True)
def grad_phi_x(V, mu, s2q, r, a0, b0, y2):
    M, D = V.shape
    T = D - 1
    out = np.empty((M, D))
    for i in range(M):
        phi = V[i, 0]
        c0 = V[i, 1] - mu
        g = ((a0 - 1) / (1 + phi) - (b0 - 1) / (1 - phi) - phi / (1 - phi * phi)
             + phi * r * (c0 * c0 + s2q))
        acc = 0.0
        for t in range(T):
            out[i, t + 1] = -0.5 + 0.5 * y2[t] * math.exp(-V[i, t + 1])
        out[i, 1] -= r * (1 - phi * phi) * c0
        for t in range(1, T):
            cp = V[i, t] - mu
            cc = V[i, t + 1] - mu
            acc += cp * cc - phi * cp * cp + (1 - phi) * s2q
            e = cc - phi * cp
            out[i, t + 1] -= r * e
            out[i, t] += phi * r * e
        out[i, 0] = g + r * acc
    return out


@njit(cache=True)
def sv_log_joint_rows(theta, y2, sigma0_sq, a0, b0, alpha0, beta0, log_beta_fn_ab, lgamma_alpha0):
    """Rows ``(mu, sigma2, phi, x_1..x_T)``; -inf outside the support."""
    M, D = theta.shape
    T = D - 3
    out = np.empty(M)
    c_mu = -0.5 * (LOG_2PI + math.log(sigma0_sq))
    c_phi = -(a0 + b0 - 1) * math.log(2.0) - log_beta_fn_ab
    c_s2 = alpha0 * math.log(beta0) - lgamma_alpha0
    for i in range(M):
        mu = theta[i, 0]
        s2 = theta[i, 1]
        phi = theta[i, 2]
        if not (abs(phi) < 1 and s2 > 0):
            out[i] = -np.inf
            continue
        ls2 = math.log(s2)
        lp = c_mu - 0.5 * mu * mu / sigma0_sq
        lp += (a0 - 1) * math.log1p(phi) + (b0 - 1) * math.log1p(-phi) + c_phi
        lp += c_s2 - (alpha0 + 1) * ls2 - beta0 / s2
        e1 = theta[i, 3] - mu
        lp += -0.5 * (LOG_2PI + ls2 - math.log1p(-phi * phi)) - 0.5 * (1 - phi * phi) * e1 * e1 / s2
        ss = 0.0
        obs = 0.0
        for t in range(T):
            x = theta[i, 3 + t]
            obs += x + y2[t] * math.exp(-x)
            if t > 0:
                rr = x - mu - phi * (theta[i, 2 + t] - mu)
                ss += rr * rr
        lp += -0.5 * (T - 1) * (LOG_2PI + ls2) - 0.5 * ss / s2
        lp += -0.5 * T * LOG_2PI - 0.5 * obs
        out[i] = lp
    return out


@njit(cache=True)
def q_mu_moments(V):
    """Particle averages <1-phi^2>, <(1-phi)^2>, <(1-phi^2) x_1>, <(1-phi) sum_t (x_t - phi x_{t-1})>."""
    M, D = V.shape
    s1 = s2 = s3 = s4 = 0.0
    for i in range(M):
        phi = V[i, 0]
        s1 += 1 - phi * phi
        s2 += (1 - phi) * (1 - phi)
        s3 += (1 - phi * phi) * V[i, 1]
        acc = 0.0
        for t in range(2, D):
            acc += V[i, t] - phi * V[i, t - 1]
        s4 += (1 - phi) * acc
    return s1 / M, s2 / M, s3 / M, s4 / M


@njit(cache=True)
def q_sigma2_moment(V, mu_q, sigma_q2):
    """Particle average of the bracket in the q(sigma^2) rate."""
    M, D = V.shape
    total = 0.0
    for i in range(M):
        phi = V[i, 0]
        e1 = V[i, 1] - mu_q
        acc = (1 - phi * phi) * (e1 * e1 + sigma_q2)
        k = (1 - phi) * (1 - phi) * sigma_q2
        for t in range(2, D):
            rr = V[i, t] - mu_q * (1 - phi) - phi * V[i, t - 1]
            acc += rr * rr + k
        total += acc
    return total / M


@njit(cache=True)
def bidiag_factor(diag, off):
    """Upper bidiagonal U with U'U equal to the symmetric tridiagonal (diag, off)."""
    T = diag.shape[0]
    d = np.empty(T)
    u = np.empty(T - 1)
    d[0] = math.sqrt(diag[0])
    for t in range(T - 1):
        u[t] = off[t] / d[t]
        d[t + 1] = math.sqrt(diag[t + 1] - u[t] * u[t])
    return d, u


@njit(cache=True)
def bidiag_solve_cols(d, u, B, transpose_first):
    """Column-wise ``U^-1 b`` or, with ``transpose_first``, ``(U'U)^-1 b`` for ``B`` of shape ``(T, M)``."""
    T, M = B.shape
    out = B.copy()
    if transpose_first:
        for j in range(M):
            out[0, j] /= d[0]
        for t in range(1, T):
            a = u[t - 1]
            inv = 1.0 / d[t]
            for j in range(M):
                out[t, j] = (out[t, j] - a * out[t - 1, j]) * inv
    inv = 1.0 / d[T - 1]
    for j in range(M):
        out[T - 1, j] *= inv
    for t in range(T - 2, -1, -1):
        a = u[t]
        inv = 1.0 / d[t]
        for j in range(M):
            out[t, j] = (out[t, j] - a * out[t + 1, j]) * inv
    return out
