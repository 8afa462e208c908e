"""Action functionals, the lower-bound identity, optimal paths and controls."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochns.action import (
    ReplayMissError,
    action_gradient,
    action_IT,
    action_JT,
    control_for_target,
    hamiltonian_of_path,
    minimize_action,
    quasipotential_exact,
    reversed_flow_path,
)
from stochns.dynamics import DiscretePath, SolverConfig, decay_time, simulate
from stochns.spectral import SpectralField, Truncation, inner, random_field, single_mode


def smooth_path(trunc, rng, t_final, n_nodes, n_harmonics=3, scale=0.5):
    """Random path that is a low-order trigonometric polynomial in time."""
    t = np.linspace(0.0, t_final, n_nodes)
    states = np.zeros((n_nodes,) + trunc.shape, dtype=complex)
    for m in range(n_harmonics + 1):
        c = random_field(trunc, rng, slope=1.0, norm=scale / (1 + m)).coeffs
        states += np.cos(m * np.pi * t / t_final)[:, None, None] * c
    return DiscretePath(t, states, trunc)


class TestActionValues:
    def test_exact_solution_has_small_action(self, tr4, rng):
        x = random_field(tr4, rng, norm=1.0)
        path = simulate(x, SolverConfig(dt=1e-3, t_final=0.5, scheme="etd-rk2"))
        a = action_IT(path)
        # the midpoint residual of an exact trajectory is O(dt^2)
        assert a.value < 1e-6
        assert len(a.integrand) == len(path) - 1

    def test_linear_action_of_constant_single_mode(self, tr4):
        # u = c e_k constant: H = |k|^2 u, so I = (T/2)|k|^4 ||u||^2
        u = single_mode(tr4, (1, 2), 0.3)
        states = np.repeat(u.coeffs[None], 11, axis=0)
        path = DiscretePath(np.linspace(0, 2.0, 11), states, tr4)
        expect = 0.5 * 2.0 * 25 * u.norm() ** 2
        assert action_IT(path).value == pytest.approx(expect, rel=1e-13)
        assert action_JT(path).value == pytest.approx(expect, rel=1e-13)

    def test_jt_equals_it_without_nonlinearity(self, tr4, rng):
        p = smooth_path(tr4, rng, 1.0, 21)
        assert action_JT(p).value == action_IT(p, nonlinear=False).value

    def test_additive_over_concatenation(self, tr4, rng):
        p = smooth_path(tr4, rng, 2.0, 41)
        a, b = p.slice(0, 21), p.slice(20, 41)
        assert action_IT(p).value == pytest.approx(action_IT(a).value + action_IT(b).value, rel=1e-13)
        joined = a.concat(b)
        assert action_IT(joined).value == pytest.approx(action_IT(p).value, rel=1e-13)

    def test_needs_three_nodes(self, tr4):
        p = DiscretePath(np.array([0.0, 1.0]), np.zeros((2,) + tr4.shape), tr4)
        with pytest.raises(ValueError):
            action_IT(p)
        with pytest.raises(ValueError):
            hamiltonian_of_path(p)

    def test_quasipotential_exact(self, tr4):
        x = single_mode(tr4, (1, 1), 1.0)
        assert quasipotential_exact(x) == pytest.approx(2 * 2.0)


class TestLowerBound:
    @given(st.integers(0, 2**32 - 1), st.sampled_from([11, 41, 101]))
    def test_identity_holds_for_every_discrete_path(self, seed, n_nodes):
        tr = Truncation(3)
        rng = np.random.default_rng(seed)
        states = np.array([random_field(tr, rng, norm=rng.uniform(0, 2)).coeffs for _ in range(n_nodes)])
        p = DiscretePath(np.linspace(0, 1.5, n_nodes), states, tr)
        lower = p.end.norm(1) ** 2 - p.start.norm(1) ** 2
        value = action_IT(p).value
        assert value >= lower - 1e-10 * max(1.0, abs(value))


class TestGradient:
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_matches_finite_differences(self, seed, nonlinear):
        tr = Truncation(3)
        rng = np.random.default_rng(seed)
        p = smooth_path(tr, rng, 1.0, 9, scale=1.0)
        dt = p.dt
        _, grad = action_gradient(p.states, tr, dt, nonlinear)
        i = int(rng.integers(0, len(p)))
        v = random_field(tr, rng).coeffs
        h = 1e-6
        plus, minus = p.states.copy(), p.states.copy()
        plus[i] += h * v
        minus[i] -= h * v
        fd = (action_gradient(plus, tr, dt, nonlinear)[0] - action_gradient(minus, tr, dt, nonlinear)[0]) / (2 * h)
        assert fd == pytest.approx(float(inner(grad[i], v)), rel=1e-6, abs=1e-8)

    def test_value_agrees_with_action(self, tr4, rng):
        p = smooth_path(tr4, rng, 1.0, 15)
        value, _ = action_gradient(p.states, tr4, p.dt)
        assert value == pytest.approx(action_IT(p).value, rel=1e-13)


class TestReversedFlow:
    def test_action_matches_energy_drop(self, tr4):
        x = random_field(tr4, np.random.default_rng(4), slope=1.0)
        x = x * (1.0 / x.norm(1))
        defects = []
        for dt in (1e-2, 5e-3, 2.5e-3):
            p = reversed_flow_path(x, 5.0, dt)
            assert np.array_equal(p.end.coeffs, x.coeffs)
            drop = x.norm(1) ** 2 - p.start.norm(1) ** 2
            defects.append(abs(action_IT(p).value - drop))
        assert defects[0] < 1e-4
        assert defects[0] > defects[1] > defects[2]

    def test_hamiltonian_is_twice_stokes(self, tr4, rng):
        x = random_field(tr4, rng, norm=0.8)
        p = reversed_flow_path(x, 1.0, 1e-3)
        h = hamiltonian_of_path(p)
        mid = 0.5 * (p.states[1:] + p.states[:-1])
        err = np.abs(h.states - 2 * tr4.power(1.0) * mid).max()
        assert err < 1e-3 * np.abs(h.states).max()

    def test_linear_variant(self, tr4, rng):
        x = random_field(tr4, rng, norm=1.0)
        p = reversed_flow_path(x, 5.0, 1e-3, nonlinear=False)
        drop = x.norm(1) ** 2 - p.start.norm(1) ** 2
        assert action_IT(p, nonlinear=False).value == pytest.approx(drop, abs=1e-5)


class TestMinimizer:
    def test_reaches_quasipotential(self, tr4):
        x = single_mode(tr4, (1, 0), 1.0 / math.sqrt(2))
        path, res = minimize_action(x, 5.0, 251)
        assert res.converged
        assert res.value == pytest.approx(1.0, rel=0.05)
        assert np.array_equal(path.end.coeffs, x.coeffs)
        assert not np.any(path.start.coeffs)
        hist = res.history
        assert all(b <= a + 1e-12 * abs(a) for a, b in zip(hist, hist[1:]))

    def test_multi_mode_target_with_nonlinearity(self, tr4):
        x = random_field(tr4, np.random.default_rng(6), slope=1.5)
        x = x * (1.0 / x.norm(1))
        _, res = minimize_action(x, 5.0, 251)
        # the lower-bound identity keeps the minimum at or above ||x||_V^2 up to
        # the part of the reversed flow not yet at 0
        assert 0.98 <= res.value <= 1.05

    def test_warm_start_from_reversed_flow(self, tr4):
        x = single_mode(tr4, (1, 1), 0.5)
        init = reversed_flow_path(x, 4.0, 4.0 / 200)
        init.states[0] = 0
        _, res = minimize_action(x, 4.0, 201, init=init)
        assert res.value == pytest.approx(quasipotential_exact(x), rel=0.05)

    def test_rejects_mismatched_init(self, tr4):
        x = single_mode(tr4, (1, 0), 1.0)
        init = DiscretePath.linear(SpectralField.zeros(tr4), x, 2.0, 11)
        with pytest.raises(ValueError):
            minimize_action(x, 3.0, 11, init=init)

    def test_fixed_nonzero_start(self, tr4):
        x0 = single_mode(tr4, (1, 0), 0.3)
        x1 = single_mode(tr4, (0, 1), 0.3)
        path, res = minimize_action(x1, 2.0, 101, x_start=x0)
        assert np.array_equal(path.start.coeffs, x0.coeffs)
        assert res.value >= x1.norm(1) ** 2 - x0.norm(1) ** 2 - 1e-12


class TestControlForTarget:
    def test_replays_land_near_target(self, tr4):
        x = single_mode(tr4, (1, 0), 1.0 / math.sqrt(2))
        t1 = decay_time(1.0, 0.05, 10, trunc=tr4)
        rng = np.random.default_rng(3)
        starts = [random_field(tr4, rng, norm=rng.uniform(0, 1)) for _ in range(3)]
        cp = control_for_target(x, 0.05, t1, 3.0, dt=2e-3, starts=starts)
        assert max(cp.replay_distances) < 0.1
        assert cp.cost <= quasipotential_exact(x) + 0.05
        end = cp.replay(starts[0]).end
        assert (end - x).norm() == pytest.approx(cp.replay_distances[0], rel=1e-9)

    def test_miss_raises(self, tr4):
        x = single_mode(tr4, (1, 0), 1.0)
        far = [random_field(tr4, np.random.default_rng(0), norm=5.0)]
        with pytest.raises(ReplayMissError) as info:
            control_for_target(x, 0.05, 0.05, 1.0, dt=1e-2, delta=0.01, starts=far)
        assert info.value.distance >= 0.005

    def test_zero_target_needs_no_control(self, tr4):
        cp = control_for_target(SpectralField.zeros(tr4), 0.05, 1.0, 1.0, dt=1e-2)
        assert cp.cost == 0.0
        assert not np.any(cp.controls)
