"""Noise covariance, counter-based Gaussian stream and exact OU transition."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochns.dynamics import NoiseSource
from stochns.noise import (
    CovarianceSpec,
    NoiseSchedule,
    RngStream,
    apply_sqrtQ,
    convolution_series_bound,
    guarded_delta_range,
    loglog_slope,
    noise_from_normals,
    ou_exact_step,
    ou_transition,
    p_epsilon,
    sigma_array,
    sigma_k,
    trace_Q,
)
from stochns.spectral import SpectralField, Truncation, random_field, reality_defect


class TestCovariance:
    def test_sigma_closed_form(self):
        spec = CovarianceSpec(beta=3, delta=0.5)
        assert sigma_k(spec, (1, 1)) == pytest.approx((1 + 0.5 * 8) ** -0.5)
        with pytest.raises(ValueError):
            sigma_k(spec, (0, 0))

    def test_sigma_array_matches_scalar(self, tr4):
        spec = CovarianceSpec(beta=2.5, delta=0.1)
        s = sigma_array(spec, tr4)
        n = tr4.n_max
        assert s[n, n] == 0.0
        for k1 in range(-n, n + 1):
            for k2 in range(-n, n + 1):
                if (k1, k2) != (0, 0):
                    assert s[k1 + n, k2 + n] == pytest.approx(sigma_k(spec, (k1, k2)), rel=1e-15)

    def test_apply_sqrtQ_preserves_reality(self, tr4, rng):
        u = random_field(tr4, rng)
        assert apply_sqrtQ(CovarianceSpec(3, 0.2), u).is_real()

    def test_trace_and_p_epsilon_at_n1(self):
        # |k|^2 = 1 (4 modes, sigma^2 = 1/2) and |k|^2 = 2 (4 modes, sigma^2 = 1/9)
        tr = Truncation(1)
        spec = CovarianceSpec(beta=3, delta=1.0)
        assert trace_Q(spec, tr) == pytest.approx(2 + 4 / 9, rel=1e-15)
        assert p_epsilon(spec, tr) == pytest.approx(2 + 8 / 9, rel=1e-15)

    def test_series_at_n1(self):
        series, bound = convolution_series_bound(CovarianceSpec(3, 0.5), Truncation(1))
        assert series == pytest.approx(4 / 1.5 + 4 / (2 * 5.0), rel=1e-15)
        assert bound == pytest.approx((math.log(2) + 1) / 3)

    @pytest.mark.parametrize("delta", [0.0, 1.0, 2.0])
    def test_series_rejects_delta_outside_unit_interval(self, delta):
        with pytest.raises(ValueError):
            convolution_series_bound(CovarianceSpec(3, delta), Truncation(2))

    def test_p_epsilon_warns_for_small_beta(self):
        with pytest.warns(UserWarning, match="beta"):
            p_epsilon(CovarianceSpec(2.0, 0.1), Truncation(2))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            p_epsilon(CovarianceSpec(3.0, 0.1), Truncation(2))

    @pytest.mark.parametrize("kw", [{"beta": 0}, {"beta": -1}, {"delta": -0.1}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            CovarianceSpec(**kw)

    def test_trace_decreases_with_delta(self, tr4):
        t = [trace_Q(CovarianceSpec(3, d), tr4) for d in (1e-3, 1e-2, 1e-1, 1.0)]
        assert all(a > b for a, b in zip(t, t[1:]))

    def test_loglog_slope_exact_for_power_law(self):
        x = np.geomspace(1, 100, 7)
        assert loglog_slope(x, 3 * x**0.4) == pytest.approx(0.4)

    def test_guarded_range(self):
        assert guarded_delta_range(3, 64) == pytest.approx(16.0**-6)


class TestSchedule:
    def test_delta_law(self):
        s = NoiseSchedule(theta=2, c_delta=0.5)
        assert s.delta(0.1) == pytest.approx(0.005)
        assert s.spec(0.1, 4).beta == 4

    def test_hypothesis_flags(self):
        flags = NoiseSchedule(theta=1).hypotheses(3)
        assert flags == {"log_condition": True, "trace_bounded": True, "p_condition": True, "beta_gt_2": True}
        flags = NoiseSchedule(theta=2).hypotheses(3)
        assert not flags["p_condition"] and flags["trace_bounded"]
        assert not NoiseSchedule().hypotheses(2)["beta_gt_2"]

    def test_monotone(self):
        assert NoiseSchedule().check_decreasing([0.5, 0.2, 0.1])

    def test_rejects_bad_law(self):
        with pytest.raises(ValueError):
            NoiseSchedule(theta=0)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, 1).complex_normals([0, 1, 2], 5, 10)
        b = RngStream(7, 1).complex_normals([0, 1, 2], 5, 10)
        assert np.array_equal(a, b)

    @given(st.integers(0, 2**63), st.integers(0, 1000), st.integers(0, 10**6))
    def test_draw_depends_only_on_coordinates(self, seed, traj, step):
        s = RngStream(seed)
        alone = s.complex_normals([traj], step, 6)[0]
        batch = s.complex_normals([traj + 3, traj, traj + 1], step, 6)[1]
        assert np.array_equal(alone, batch)

    def test_coordinates_decorrelate(self):
        s = RngStream(0)
        base = s.uniforms([0], 0, 4)
        assert not np.array_equal(base, s.uniforms([1], 0, 4))
        assert not np.array_equal(base, s.uniforms([0], 1, 4))
        assert not np.array_equal(base, RngStream(0, 1).uniforms([0], 0, 4))
        assert not np.array_equal(base, RngStream(1).uniforms([0], 0, 4))

    def test_uniform_range(self):
        u = RngStream(3).uniforms(np.arange(1000), 0, 100)
        assert u.min() > 0 and u.max() <= 1

    def test_gaussian_moments(self):
        g = RngStream(11).complex_normals(np.arange(20000), 0, 10).ravel()
        n = g.size
        assert abs(g.mean()) < 4 / math.sqrt(n)
        assert np.mean(np.abs(g) ** 2) == pytest.approx(1.0, abs=4 * 1 / math.sqrt(n))
        assert abs(np.mean(g**2)) < 4 / math.sqrt(n)  # circular symmetry
        x = RngStream(11).normals(np.arange(20000), 0, 9).ravel()
        assert np.var(x) == pytest.approx(1.0, abs=4 * math.sqrt(2 / x.size))
        # fourth moment of a standard normal is 3
        assert np.mean(x**4) == pytest.approx(3.0, abs=0.1)


class TestOU:
    def test_transition_semigroup(self, tr4):
        spec = CovarianceSpec(3, 0.1)
        d1, v1 = ou_transition(tr4, spec, 0.3, 0.05)
        d2, v2 = ou_transition(tr4, spec, 0.3, 0.1)
        assert np.abs(d1 * d1 - d2).max() < 1e-15
        assert np.abs(d1 * d1 * v1 + v1 - v2).max() < 1e-15

    def test_transition_small_dt_limit(self, tr4):
        spec = CovarianceSpec(3, 0.1)
        _, var = ou_transition(tr4, spec, 0.3, 1e-8)
        s2 = sigma_array(spec, tr4) ** 2
        assert np.allclose(var, 0.3 * s2 * 1e-8, rtol=1e-6)

    def test_noise_is_real(self, tr4):
        _, var = ou_transition(tr4, CovarianceSpec(), 0.1, 0.01)
        g = RngStream(0).complex_normals(np.arange(3), 0, len(tr4.rep_index[0]))
        assert reality_defect(noise_from_normals(tr4, np.sqrt(var), g)) == 0.0

    def test_single_step_matches_batched_source(self, tr4):
        spec = CovarianceSpec(3, 0.2)
        rng = RngStream(5, 2)
        z = SpectralField.zeros(tr4)
        one = ou_exact_step(z, spec, 0.2, 0.01, rng, step=4, trajectory=17)
        batch = NoiseSource(tr4, spec, 0.2, 0.01, rng)(np.array([3, 17]), 4)
        assert np.array_equal(one.coeffs, batch[1])

    def test_stationary_variance_per_mode(self):
        tr = Truncation(2)
        spec = CovarianceSpec(3, 0.5)
        eps, dt, n = 0.4, 0.5, 10_000
        decay, var = ou_transition(tr, spec, eps, dt)
        src = NoiseSource(tr, spec, eps, dt, RngStream(21))
        z = np.zeros((n,) + tr.shape, dtype=complex)
        for j in range(40):
            z = decay * z + src(np.arange(n), j)
        ri, rj = tr.rep_index
        target = eps * sigma_array(spec, tr)[ri, rj] ** 2 / (2 * tr.ksq[ri, rj])
        p = np.abs(z[:, ri, rj]) ** 2
        z_scores = (p.mean(0) - target) / (p.std(0, ddof=1) / math.sqrt(n))
        # 12 modes: allow one 3-sigma excursion, none beyond 4 sigma
        assert np.sum(np.abs(z_scores) > 3) <= 1
        assert np.all(np.abs(z_scores) < 4)

    def test_zero_noise_is_pure_decay(self, tr4, rng):
        u = random_field(tr4, rng)
        out = ou_exact_step(u, CovarianceSpec(), 0.0, 0.3, RngStream(0))
        assert np.allclose(out.coeffs, np.exp(-tr4.ksq * 0.3) * u.coeffs, rtol=1e-15, atol=0)

    def test_rejects_bad_dt(self, tr4):
        with pytest.raises(ValueError):
            ou_transition(tr4, CovarianceSpec(), 0.1, 0.0)
