import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gradcheck import central_diff, rel_err
from pmfvb.errors import InvalidArgument, NumericalFailure
from pmfvb.samplers import (
    AdamSgldConfig,
    DensityTarget,
    PsgldConfig,
    SamplerState,
    UnconstrainedTarget,
    adam_sgld_step,
    mala_sample,
    psgld_step,
    sgld_step,
)

STD_NORMAL = DensityTarget(lambda z: -0.5 * np.sum(z * z, axis=1), lambda z: -z, 1)


class TestSgld:
    def test_pure_diffusion_variance(self, rng):
        theta = np.zeros(10 ** 5)
        inc = sgld_step(theta, np.zeros_like(theta), 0.3, rng) - theta
        assert inc.var() == pytest.approx(0.3, rel=0.03)

    def test_drift(self):
        out = sgld_step(np.zeros(2), np.array([1.0, -2.0]), 0.5, np.random.default_rng(1))
        noise = np.random.default_rng(1).standard_normal(2)
        np.testing.assert_array_equal(out, 0.25 * np.array([1.0, -2.0]) + np.sqrt(0.5) * noise)

    def test_tiny_step(self, rng):
        theta = rng.normal(size=5)
        assert np.max(np.abs(sgld_step(theta, -theta, 1e-14, rng) - theta)) < 1e-5

    def test_rejects_bad_input(self, rng):
        with pytest.raises(InvalidArgument):
            sgld_step(np.zeros(2), np.zeros(2), 0.0, rng)
        with pytest.raises(NumericalFailure):
            sgld_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1, rng)

    def test_gaussian_stationarity(self, rng):
        # many parallel chains on N(0, 1); the unadjusted chain's variance is 1/(1 - h/4)
        theta = np.zeros(20_000)
        for _ in range(400):
            theta = sgld_step(theta, -theta, 0.02, rng)
        assert theta.var() == pytest.approx(1.0, rel=0.1)


class TestPsgld:
    def test_huge_preconditioner_freezes(self, rng):
        state = SamplerState(np.ones(3), V=np.full(3, 1e30))
        new = psgld_step(state, np.ones(3), 0.1, rng)
        assert np.max(np.abs(new.theta - 1.0)) < 1e-6

    def test_constant_gradient_fixed_point(self, rng):
        g = np.array([2.0, -0.5])
        state = SamplerState(np.zeros(2), V=np.zeros(2))
        for _ in range(3000):
            state = psgld_step(state, g, 1e-3, rng)
        np.testing.assert_allclose(state.V, g * g, rtol=1e-10)

    def test_rho_zero(self, rng):
        g = np.array([3.0, 1.0])
        new = psgld_step(SamplerState(np.zeros(2), V=np.full(2, 7.0)), g, 0.1, rng, PsgldConfig(rho=0.0))
        np.testing.assert_array_equal(new.V, g * g)

    def test_update_formula(self):
        g = np.array([1.0, 2.0])
        V0 = np.array([0.5, 4.0])
        new = psgld_step(SamplerState(np.zeros(2), V=V0), g, 0.2, np.random.default_rng(3))
        V = 0.99 * V0 + 0.01 * g * g
        G = 1 / (np.sqrt(V) + 1e-5)
        noise = np.random.default_rng(3).standard_normal(2)
        np.testing.assert_allclose(new.theta, 0.1 * G * g + np.sqrt(0.2) * np.sqrt(G) * noise, rtol=1e-14)

    def test_negative_preconditioner_rejected(self):
        with pytest.raises(InvalidArgument):
            SamplerState(np.zeros(2), V=np.array([-1.0, 1.0]))


def _hand_adam_trace(theta, grad, h, cfg, noises):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = []
    for eta in noises:
        g = grad(theta)
        drift = np.array([m[j] / (v[j] + cfg.lam) ** 0.5 for j in range(len(theta))])
        theta = np.array([theta[j] + h / 2 * (g[j] + cfg.a * drift[j]) + h ** 0.5 * eta[j]
                          for j in range(len(theta))])
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        out.append(theta)
    return out


class TestAdamSgld:
    @given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_zero_a_is_sgld(self, seed, h):
        r = np.random.default_rng(seed)
        theta = r.normal(size=6)
        g = r.normal(size=6)
        state = SamplerState(theta, m=r.normal(size=6), v=r.random(6))
        a = adam_sgld_step(state, g, h, np.random.default_rng(seed + 1), AdamSgldConfig(a=0.0))
        b = sgld_step(theta, g, h, np.random.default_rng(seed + 1))
        assert np.array_equal(a.theta, b)

    def test_frozen_moments(self, rng):
        cfg = AdamSgldConfig(beta1=1.0, beta2=1.0)
        state = SamplerState(np.ones(2))
        for _ in range(5):
            state = adam_sgld_step(state, rng.normal(size=2), 0.01, rng, cfg)
        np.testing.assert_array_equal(state.m, 0.0)
        np.testing.assert_array_equal(state.v, 0.0)

    def test_hand_trace_quadratic(self):
        A = np.array([1.0, 4.0])

        def grad(t):
            return -A * (t - 1.0)

        cfg = AdamSgldConfig(a=3.0, lam=1e-3)
        noises = np.random.default_rng(0).standard_normal((3, 2))
        expected = _hand_adam_trace(np.zeros(2), grad, 0.05, cfg, noises)
        rng = np.random.default_rng(0)
        state = SamplerState(np.zeros(2))
        for k in range(3):
            state = adam_sgld_step(state, grad(state.theta), 0.05, rng, cfg)
            np.testing.assert_allclose(state.theta, expected[k], rtol=1e-13)


class TestUnconstrained:
    def _target(self):
        # independent Gamma(3, 2), Beta-like on (-1, 1), and Normal coordinates
        def logp(t):
            return (2 * np.log(t[:, 0]) - 2 * t[:, 0] + 4 * np.log1p(t[:, 1]) + np.log1p(-t[:, 1])
                    - 0.5 * t[:, 2] ** 2)

        def grad(t):
            return np.column_stack([2 / t[:, 0] - 2, 4 / (1 + t[:, 1]) - 1 / (1 - t[:, 1]), -t[:, 2]])

        return UnconstrainedTarget(DensityTarget(logp, grad, 3), ["log", "tanh", "identity"])

    def test_round_trip(self, rng):
        ut = self._target()
        z = rng.normal(size=(100, 3)) * 3
        np.testing.assert_allclose(ut.to_unconstrained(ut.to_constrained(z)), z, atol=1e-12)

    def test_gradient_finite_differences(self, rng):
        ut = self._target()
        worst = 0.0
        for _ in range(100):
            z = rng.normal(size=3)
            fd = central_diff(lambda v: ut.log_density(v[None])[0], z)
            worst = max(worst, rel_err(ut.grad(z[None])[0], fd))
        assert worst <= 1e-6

    def test_jacobian_values(self):
        ut = self._target()
        z = np.array([[0.7, 0.3, 5.0]])
        assert ut.log_jacobian(z)[0] == pytest.approx(0.7 + np.log(1 - np.tanh(0.3) ** 2), abs=1e-14)

    def test_domain_checks(self):
        ut = self._target()
        with pytest.raises(InvalidArgument):
            ut.to_unconstrained(np.array([[-1.0, 0.0, 0.0]]))
        with pytest.raises(InvalidArgument):
            UnconstrainedTarget(DensityTarget(None, None, 2), ["log"])
        with pytest.raises(InvalidArgument):
            UnconstrainedTarget(DensityTarget(None, None, 1), ["exp"])


class TestMala:
    def test_gaussian_moments(self):
        res = mala_sample(STD_NORMAL, 1.5, 10 ** 6, 200, np.random.default_rng(2), n_chains=1000)
        assert abs(res.samples.mean()) < 0.02
        assert res.samples.var() == pytest.approx(1.0, rel=0.02)

    def test_ks(self):
        res = mala_sample(STD_NORMAL, 1.5, 10 ** 5, 200, np.random.default_rng(3), n_chains=1000)
        assert stats.kstest(res.samples[:, 0], "norm").statistic < 0.01

    def test_small_step_accepts(self):
        res = mala_sample(STD_NORMAL, 1e-6, 1000, 10, np.random.default_rng(4), n_chains=10)
        assert res.acceptance > 0.999

    def test_huge_step_flags(self):
        res = mala_sample(STD_NORMAL, 1e4, 2000, 10, np.random.default_rng(5), n_chains=10)
        assert res.low_acceptance

    def test_deterministic(self):
        a = mala_sample(STD_NORMAL, 1.0, 500, 10, np.random.default_rng(6), n_chains=5)
        b = mala_sample(STD_NORMAL, 1.0, 500, 10, np.random.default_rng(6), n_chains=5)
        assert np.array_equal(a.samples, b.samples)

    def test_preconditioned_correlated_scales(self):
        scales = np.array([0.1, 10.0])
        target = DensityTarget(lambda z: -0.5 * np.sum((z / scales) ** 2, axis=1), lambda z: -z / scales ** 2, 2)
        res = mala_sample(target, 0.01, 200_000, 2000, np.random.default_rng(7), n_chains=200, adapt=True)
        np.testing.assert_allclose(res.samples.std(axis=0), scales, rtol=0.05)
        assert 0.3 < res.acceptance < 0.85

    def test_bad_start(self):
        target = DensityTarget(lambda z: np.where(z[:, 0] > 0, 0.0, -np.inf), lambda z: np.zeros_like(z), 1)
        with pytest.raises(InvalidArgument):
            mala_sample(target, 0.1, 10, 0, np.random.default_rng(0), x0=-1.0)
