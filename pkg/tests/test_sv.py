import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import central_diff, rel_err
from pmfvb.engine import LmcConfig, StoppingRule
from pmfvb.errors import DomainError, InvalidArgument
from pmfvb.sv import (
    PHI_MARGIN,
    SvData,
    SvPreconditioner,
    SvPriors,
    SvTarget,
    SvUnconstrained,
    generate_sv_data,
    grad_phi_logq,
    grad_x_logq,
    log_q_phi_x,
    reflect_phi,
    run_pmfvb_sv,
    sv_log_joint,
    sv_log_joint_grad,
    update_q_mu,
    update_q_sigma2,
)

PRIORS = SvPriors()


def _cloud(rng, M, T, phi_range=0.9):
    return rng.uniform(-phi_range, phi_range, M), rng.normal(0.5, 1.0, size=(M, T))


class TestUpdateQMu:
    def test_zero_data(self):
        T = 6
        mean, var = update_q_mu(np.zeros(3), np.zeros((3, T)), 2.0, 2.0, PRIORS)
        assert mean == 0.0
        assert var == pytest.approx(1 / (1 / PRIORS.sigma0_sq + 1 + (T - 1)))

    def test_single_particle_symbolic(self):
        phi, x1, x2, r, s0 = sp.symbols("phi x1 x2 r s0")
        A = 1 / s0 + r * (1 - phi ** 2) + r * (1 - phi) ** 2
        B = r * (1 - phi ** 2) * x1 + r * (1 - phi) * (x2 - phi * x1)
        vals = {phi: sp.Rational(3, 10), x1: sp.Rational(-1, 2), x2: sp.Rational(7, 5), r: 4, s0: 10}
        mean, var = update_q_mu([0.3], [[-0.5, 1.4]], 4.0, 1.0, PRIORS)
        assert var == pytest.approx(float(1 / A.subs(vals)), rel=1e-14)
        assert mean == pytest.approx(float((B / A).subs(vals)), rel=1e-14)

    def test_monte_carlo_expectations(self, rng):
        # phi ~ U(-1/2, 1/2), x_t ~ N(m_t, 1) independently: exact moments in closed form
        N, T, r = 10 ** 5, 4, 3.0
        m = np.array([0.5, -1.0, 2.0, 0.3])
        phi = rng.uniform(-0.5, 0.5, N)
        x = m + rng.standard_normal((N, T))
        e1m, e1m2, ephi1m = 1 - 1 / 12, 1 + 1 / 12, -1 / 12  # E[1-phi^2], E[(1-phi)^2], E[phi(1-phi)]
        A_exact = 1 / PRIORS.sigma0_sq + r * e1m + (T - 1) * r * e1m2
        # E[(1-phi)(x_t - phi x_{t-1})] = m_t - E[phi(1-phi)] m_{t-1}
        B_exact = r * e1m * m[0] + r * sum(m[t] - ephi1m * m[t - 1] for t in range(1, T))
        a_i = r * (1 - phi ** 2) + (T - 1) * r * (1 - phi) ** 2
        b_i = r * (1 - phi ** 2) * x[:, 0] + r * (1 - phi) * np.sum(x[:, 1:] - phi[:, None] * x[:, :-1], axis=1)
        mean, var = update_q_mu(phi, x, r, 1.0, PRIORS)
        A, B = 1 / var, mean / var
        assert abs(A - A_exact) < 3 * a_i.std() / math.sqrt(N)
        assert abs(B - B_exact) < 3 * b_i.std() / math.sqrt(N)

    def test_unknown_variant(self):
        with pytest.raises(InvalidArgument):
            update_q_mu([0.1], [[0.0, 0.0]], 1.0, 1.0, PRIORS, variant="other")


def _mc_mu_coefficients(rng, phi, x, alpha, beta, data, N=10 ** 5):
    """Brute-force optimal q(mu): the expected log joint is quadratic in mu, read off its coefficients."""
    i = rng.integers(len(phi), size=N)
    s2 = beta / rng.gamma(alpha, 1.0, size=N)
    f = {u: sv_log_joint(np.full(N, float(u)), phi[i], s2, x[i], data, PRIORS) for u in (-1, 0, 1)}
    a_n = f[1] - 2 * f[0] + f[-1]  # = -A per draw
    b_n = (f[1] - f[-1]) / 2  # = B per draw
    return -a_n.mean(), b_n.mean(), a_n.std() / math.sqrt(N), b_n.std() / math.sqrt(N)


class TestMuOracle:
    def test_corrected_variant_matches_expected_log_joint(self, rng):
        T = 8
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=3)
        phi, x = _cloud(rng, 300, T)
        alpha, beta = 6.5, 1.3
        A_mc, B_mc, se_a, se_b = _mc_mu_coefficients(rng, phi, x, alpha, beta, data)
        mean, var = update_q_mu(phi, x, alpha, beta, PRIORS, "corrected")
        assert abs(1 / var - A_mc) < 3 * se_a
        assert abs(mean / var - B_mc) < 3 * se_b

    def test_paper_variant_disagrees(self, rng):
        T = 8
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=3)
        phi, x = _cloud(rng, 300, T)
        _, B_mc, _, se_b = _mc_mu_coefficients(rng, phi, x, 6.5, 1.3, data)
        mean, var = update_q_mu(phi, x, 6.5, 1.3, PRIORS, "paper")
        assert abs(mean / var - B_mc) > 10 * se_b


class TestUpdateQSigma2:
    def test_shape_parameter(self, rng):
        phi, x = _cloud(rng, 5, 500)
        alpha, _ = update_q_sigma2(phi, x, 1.0, 0.1, PRIORS)
        assert alpha == 252.5

    def test_unit_root_constant_path(self):
        alpha, beta = update_q_sigma2(np.ones(3), np.full((3, 7), 0.4), 0.4, 0.3, PRIORS)
        assert beta == PRIORS.beta0

    def test_naive_loop(self, rng):
        phi, x = _cloud(rng, 20, 9)
        mu_q, s2q = 0.7, 0.05
        total = 0.0
        for p, row in zip(phi, x):
            term = (1 - p * p) * ((row[0] - mu_q) ** 2 + s2q)
            for t in range(1, len(row)):
                term += (row[t] - mu_q * (1 - p) - p * row[t - 1]) ** 2 + (1 - p) ** 2 * s2q
            total += term
        _, beta = update_q_sigma2(phi, x, mu_q, s2q, PRIORS)
        assert beta == pytest.approx(PRIORS.beta0 + 0.5 * total / 20, rel=1e-10)

    def test_monte_carlo_oracle(self, rng):
        # the expected log joint is (a+1) log u - b u in u = 1/sigma^2; recover (a, b) from three u values
        T, N = 6, 10 ** 5
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=4)
        phi, x = _cloud(rng, 200, T)
        mu_q, s2q = 0.9, 0.08
        i = rng.integers(len(phi), size=N)
        mu = rng.normal(mu_q, math.sqrt(s2q), size=N)
        f = {u: sv_log_joint(mu, phi[i], np.full(N, 1 / u), x[i], data, PRIORS) for u in (1.0, 2.0, 4.0)}
        d1 = f[2.0] - f[1.0]
        d2 = f[4.0] - f[2.0]
        # solve d1 = k log 2 - b, d2 = k log 2 - 2 b  ->  b = d1 - d2, k = (2 d1 - d2) / log 2
        b_n = d1 - d2
        k_n = (2 * d1 - d2) / math.log(2)
        alpha, beta = update_q_sigma2(phi, x, mu_q, s2q, PRIORS)
        assert np.allclose(k_n, alpha + 1, atol=1e-6)
        assert abs(beta - b_n.mean()) < 3 * b_n.std() / math.sqrt(N)


class TestGradients:
    @pytest.mark.parametrize("T", [3, 10])
    def test_finite_differences(self, rng, T):
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=T)
        worst = 0.0
        for _ in range(100):
            phi = rng.uniform(-0.95, 0.95)
            x = rng.normal(0.5, 1.0, size=T)
            args = (rng.normal(), rng.uniform(0.01, 0.5), rng.uniform(3, 300), rng.uniform(0.5, 30))

            def f(v):
                return log_q_phi_x(v[:1], v[None, 1:], *args, data, PRIORS)[0]

            v = np.concatenate([[phi], x])
            fd = central_diff(f, v, step=1e-6)
            g = np.concatenate([grad_phi_logq([phi], x[None], *args, PRIORS),
                                grad_x_logq([phi], x[None], *args, data)[0]])
            worst = max(worst, rel_err(g, fd))
        assert worst <= 1e-6

    def test_phi_symmetric_point(self):
        pri = SvPriors(a0=1.0, b0=1.0)
        x = np.full((1, 5), 0.8)
        assert grad_phi_logq([0.0], x, 0.8, 0.0, 3.0, 1.0, pri)[0] == 0.0

    def test_phi_barrier(self):
        x = np.zeros((1, 4))
        near = grad_phi_logq([1 - 1e-9], x, 0.0, 0.0, 1.0, 1.0, PRIORS)[0]
        assert near < -1e7

    def test_phi_domain(self):
        with pytest.raises(DomainError):
            grad_phi_logq([1.0], np.zeros((1, 3)), 0.0, 0.1, 1.0, 1.0, PRIORS)
        with pytest.raises(DomainError):
            grad_x_logq([-1.2], np.zeros((1, 3)), 0.0, 0.1, 1.0, 1.0, SvData(np.ones(3)))

    def test_x_zero_at_balanced_point(self):
        mu = 0.3
        x_flat = np.full((1, 4), mu)
        data = SvData(np.full(4, math.exp(mu / 2)))
        g = grad_x_logq([0.0], x_flat, mu, 0.2, 5.0, 1.0, data)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_interior_equals_boundary_plus_coupling(self, rng):
        y = rng.normal(size=3)
        x = rng.normal(size=3)
        phi, mu, s2q, a, b = 0.6, 0.2, 0.1, 4.0, 2.0
        r = a / b
        interior = grad_x_logq([phi], x[None], mu, s2q, a, b, SvData(y))[0, 1]
        boundary = grad_x_logq([phi], x[None, :2], mu, s2q, a, b, SvData(y[:2]))[0, 1]
        coupling = phi * r * (x[2] - (1 - phi) * mu - phi * x[1])
        assert interior == pytest.approx(boundary + coupling, rel=1e-14)

    def test_fused_kernel_matches_reference(self, rng):
        T = 12
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=1)
        phi, x = _cloud(rng, 9, T)
        fac = {"mu": {"mean": 0.9, "var": 0.1}, "sigma2": {"alpha": 8.5, "beta": 0.9}}
        g = SvTarget(data).block_grad("phi_x", np.column_stack([phi, x]), {}, fac)
        args = (0.9, 0.1, 8.5, 0.9)
        np.testing.assert_allclose(g[:, 0], grad_phi_logq(phi, x, *args, PRIORS), rtol=1e-12)
        np.testing.assert_allclose(g[:, 1:], grad_x_logq(phi, x, *args, data), rtol=1e-12, atol=1e-12)


class TestJoint:
    def test_gradient_finite_differences(self, rng):
        T = 6
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=2)
        worst = 0.0
        for _ in range(100):
            v = np.concatenate([[rng.normal(), rng.uniform(-0.9, 0.9), rng.uniform(0.05, 1.0)], rng.normal(size=T)])

            def f(u):
                return sv_log_joint(u[:1], u[1:2], u[2:3], u[None, 3:], data, PRIORS)[0]

            fd = central_diff(f, v, step=1e-6)
            dm, dp, ds, dx = sv_log_joint_grad(v[:1], v[1:2], v[2:3], v[None, 3:], data, PRIORS)
            worst = max(worst, rel_err(np.concatenate([dm, dp, ds, dx[0]]), fd))
        assert worst <= 1e-6

    def test_unconstrained_gradient(self, rng):
        T = 5
        target = SvUnconstrained(generate_sv_data(T, 1.0, 0.8, 0.5, seed=2))
        worst = 0.0
        for _ in range(100):
            z = np.concatenate([[rng.normal(), rng.normal(), rng.normal(-1, 0.5)], rng.normal(size=T)])
            fd = central_diff(lambda u: target.log_density(u[None])[0], z, step=1e-6)
            worst = max(worst, rel_err(target.grad(z[None])[0], fd))
        assert worst <= 1e-6

    def test_unconstrained_round_trip(self, rng):
        z = np.column_stack([rng.normal(size=(4, 3)) * 2, rng.normal(size=(4, 5))])
        back = SvUnconstrained.to_unconstrained(*SvUnconstrained.to_constrained(z))
        np.testing.assert_allclose(back, z, atol=1e-12)

    def test_out_of_support(self):
        data = SvData(np.ones(3))
        lp = sv_log_joint([0.0, 0.0], [1.0, 0.2], [0.1, -1.0], np.zeros((2, 3)), data, PRIORS)
        assert np.all(lp == -np.inf)

    def test_fused_log_joint_matches_reference(self, rng):
        T = 15
        data = generate_sv_data(T, 1.0, 0.8, 0.5, seed=7)
        M = 11
        mu, phi, s2 = rng.normal(size=M), rng.uniform(-0.9, 0.9, M), rng.gamma(2.0, 0.2, M)
        x = rng.normal(size=(M, T))
        got = SvTarget(data).log_joint(np.column_stack([mu, s2, phi, x]))
        np.testing.assert_allclose(got, sv_log_joint(mu, phi, s2, x, data, PRIORS), rtol=1e-12)


class TestPreconditioner:
    def test_matches_dense_inverse(self, rng):
        T, r, phi = 7, 6.0, 0.7
        Q = np.diag(np.r_[r + 0.5, np.full(T - 2, r * (1 + phi ** 2) + 0.5), r + 0.5])
        Q += np.diag(np.full(T - 1, -r * phi), 1) + np.diag(np.full(T - 1, -r * phi), -1)
        pre = SvPreconditioner(0.02, r, phi, T)
        G = rng.normal(size=(4, T + 1))
        out = pre.apply(G)
        np.testing.assert_allclose(out[:, 0], 0.02 * G[:, 0])
        np.testing.assert_allclose(out[:, 1:], np.linalg.solve(Q, G[:, 1:].T).T, rtol=1e-12)

    def test_noise_covariance(self, rng):
        T, r, phi = 5, 3.0, 0.5
        pre = SvPreconditioner(0.1, r, phi, T)
        E = pre.apply(np.eye(T + 1))  # rows of P
        N = rng.standard_normal((200_000, T + 1))
        C = np.cov(pre.sqrt_apply(N).T)
        np.testing.assert_allclose(C, E, atol=0.01 * np.abs(E).max())


class TestReflect:
    @given(st.floats(-50, 50))
    @settings(max_examples=200)
    def test_inside_bounds(self, v):
        out = reflect_phi(np.array([v]))[0]
        assert -1 + PHI_MARGIN - 1e-12 <= out <= 1 - PHI_MARGIN + 1e-12

    @given(st.floats(-0.999, 0.999))
    def test_identity_inside(self, v):
        assert reflect_phi(np.array([v]))[0] == pytest.approx(v, abs=1e-12)

    def test_mirror(self):
        assert reflect_phi(np.array([1.0]))[0] == pytest.approx(1 - 2 * PHI_MARGIN)


class TestGenerate:
    def test_degenerate_state(self):
        mu = 0.4
        data = generate_sv_data(10 ** 4, mu, 0.5, 1e-9, seed=5)
        assert data.y.var() == pytest.approx(math.exp(mu), rel=0.05)

    def test_shape_and_seed(self):
        a = generate_sv_data(500, 1.0, 0.8, 0.5, seed=9)
        b = generate_sv_data(500, 1.0, 0.8, 0.5, seed=9)
        assert a.T == 500
        np.testing.assert_array_equal(a.y, b.y)

    @pytest.mark.parametrize("phi", [1.0, -1.5])
    def test_nonstationary_rejected(self, phi):
        with pytest.raises(InvalidArgument):
            generate_sv_data(10, 0.0, phi, 0.5, seed=0)

    def test_data_validation(self):
        with pytest.raises(InvalidArgument):
            SvData([1.0])
        with pytest.raises(InvalidArgument):
            SvData([1.0, np.nan])
        with pytest.raises(InvalidArgument):
            SvPriors(a0=0.0)


class TestRun:
    def test_zero_iterations(self):
        data = generate_sv_data(20, 1.0, 0.8, 0.5, seed=1)
        state, trace = run_pmfvb_sv(data, PRIORS, LmcConfig(0.1, max_iters=0), n_particles=10)
        assert len(trace) == 0
        assert state.alpha == PRIORS.alpha0 and state.beta == PRIORS.beta0
        assert state.mu_q == 0.0 and state.sigma_q2 == PRIORS.sigma0_sq
        assert state.cloud.values.shape == (10, 21)

    def test_invariants_along_run(self):
        data = generate_sv_data(30, 1.0, 0.8, 0.5, seed=2)
        alphas, phis_ok = [], []

        def cb(it, clouds, factors):
            alphas.append(factors["sigma2"]["alpha"])
            phi = clouds["phi_x"].values[:, 0]
            phis_ok.append(bool(np.all(np.abs(phi) < 1)))

        state, trace = run_pmfvb_sv(data, PRIORS, LmcConfig(0.1, max_iters=60, seed=4),
                                    StoppingRule(patience=10 ** 6), n_particles=40, callback=cb)
        assert set(alphas) == {PRIORS.alpha0 + 15}
        assert all(phis_ok) and len(trace) == 60
        assert state.sigma_q2 > 0 and state.beta > 0

    def test_deterministic(self):
        data = generate_sv_data(25, 1.0, 0.8, 0.5, seed=3)
        a = run_pmfvb_sv(data, PRIORS, LmcConfig(0.1, max_iters=15, seed=8), n_particles=12)
        b = run_pmfvb_sv(data, PRIORS, LmcConfig(0.1, max_iters=15, seed=8), n_particles=12)
        assert np.array_equal(a[0].cloud.values, b[0].cloud.values)
        assert np.array_equal(a[1].lower_bounds, b[1].lower_bounds)

    def test_summary(self):
        data = generate_sv_data(25, 1.0, 0.8, 0.5, seed=3)
        state, _ = run_pmfvb_sv(data, PRIORS, LmcConfig(0.1, max_iters=3), n_particles=12)
        s = state.summary()
        assert s["alpha_sigma2"] == PRIORS.alpha0 + 12.5 and s["n_particles"] == 12
        assert set(s["phi_quantiles"]) == {"0.05", "0.5", "0.95"}
