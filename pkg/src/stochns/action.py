"""Path action functionals, the quasipotential and explicit optimal paths.

Discretisation convention: for nodes ``u_0..u_N`` with spacing ``h`` the
Hamiltonian is sampled at interval midpoints,

    H_j = (u_{j+1} - u_j)/h + A m_j + B(m_j),   m_j = (u_j + u_{j+1})/2,

and ``I = (h/2) sum_j ||H_j||_H^2``.  With this choice the identity

    (h/2)||H_j||^2 = (h/2)||D_j - A m_j + B(m_j)||^2 + ||u_{j+1}||_V^2 - ||u_j||_V^2

holds exactly (up to rounding) because ``<B(m), A m> = 0`` on the torus, so
``I(u) >= ||u_N||_V^2 - ||u_0||_V^2`` for every discrete path.  Concatenated
paths share their junction node, and the action is additive over them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky_banded, solve_banded
from scipy.optimize import minimize

from .dynamics import DiscretePath, Integrator, replay_controls, solve_controlled
from .spectral import SpectralField, Truncation, nonlinearity, nonlinearity_adjoint, sobolev_norm

log = logging.getLogger(__name__)

__all__ = [
    "ActionResult",
    "ControlPath",
    "ReplayMissError",
    "hamiltonian_of_path",
    "action_IT",
    "action_JT",
    "action_gradient",
    "quasipotential_exact",
    "reversed_flow_path",
    "minimize_action",
    "control_for_target",
]


@dataclass
class ActionResult:
    value: float
    integrand: np.ndarray = field(repr=False)
    dt: float = 0.0
    converged: bool = True
    history: list[float] = field(default_factory=list, repr=False)


@dataclass
class ControlPath:
    """Piecewise-constant control ``phi`` on a uniform grid, with its cost."""

    times: np.ndarray
    controls: np.ndarray = field(repr=False)
    cost: float
    trunc: Truncation = field(repr=False)
    target: SpectralField | None = field(default=None, repr=False)
    replay_distances: list[float] = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def replay(self, y: SpectralField, scheme: str = "etd-rk2") -> DiscretePath:
        return solve_controlled(y, self.controls, self.dt, scheme=scheme)


class ReplayMissError(RuntimeError):
    def __init__(self, distance: float, tolerance: float):
        super().__init__(f"controlled replay ended {distance:.4g} from target (tolerance {tolerance:.4g})")
        self.distance = distance
        self.tolerance = tolerance


def _midpoint_terms(states: np.ndarray, trunc: Truncation, dt: float, nonlinear: bool):
    d = (states[1:] - states[:-1]) / dt
    m = 0.5 * (states[1:] + states[:-1])
    h = d + trunc.power(1.0) * m
    if nonlinear:
        h = h + nonlinearity(m, trunc)
    return h, m


def hamiltonian_of_path(u: DiscretePath, nonlinear: bool = True) -> DiscretePath:
    """``H(u) = u' + Au + B(u)`` on the midpoint grid of ``u``."""
    if len(u) < 3:
        raise ValueError("a path needs at least three nodes")
    dt = u.dt
    h, _ = _midpoint_terms(u.states, u.trunc, dt, nonlinear)
    return DiscretePath(0.5 * (u.times[1:] + u.times[:-1]), h, u.trunc)


def action_IT(u: DiscretePath, nonlinear: bool = True) -> ActionResult:
    """``(1/2) int ||u' + Au + B(u)||_H^2 dt`` by the midpoint rule."""
    if len(u) < 3:
        raise ValueError("a path needs at least three nodes")
    dt = u.dt
    h, _ = _midpoint_terms(u.states, u.trunc, dt, nonlinear)
    integrand = 0.5 * sobolev_norm(h, u.trunc, 0.0) ** 2
    return ActionResult(value=float(dt * np.sum(integrand)), integrand=integrand, dt=dt)


def action_JT(z: DiscretePath) -> ActionResult:
    """Ornstein-Uhlenbeck action ``(1/2) int ||z' + Az||_H^2 dt``."""
    return action_IT(z, nonlinear=False)


def quasipotential_exact(x: SpectralField) -> float:
    """``||x||_V^2``.

    Every truncated field lies in V, so the value is always finite here;
    roughness shows up instead as growth of this number when the truncation
    of a rough field is refined.
    """
    return float(x.norm(1.0) ** 2)


def action_gradient(states: np.ndarray, trunc: Truncation, dt: float, nonlinear: bool = True):
    """Discrete action and its H-gradient with respect to every node.

    Returns ``(value, grad)`` where ``grad[i]`` is the Riesz representative of
    the derivative with respect to ``u_i`` (endpoint rows included).
    """
    h, m = _midpoint_terms(states, trunc, dt, nonlinear)
    value = 0.5 * dt * float(np.sum(h.real**2 + h.imag**2))
    k = trunc.power(1.0) * h
    if nonlinear:
        k = k + nonlinearity_adjoint(m, h, trunc)
    grad = np.zeros_like(states)
    grad[1:] += h + 0.5 * dt * k
    grad[:-1] += -h + 0.5 * dt * k
    return value, grad


def reversed_flow_path(
    x: SpectralField,
    t_final: float,
    dt: float,
    substeps: int = 1,
    nonlinear: bool = True,
) -> DiscretePath:
    """Time reversal of ``v' = -Av + B(v)``, ``v(0) = x``.

    The returned path runs from ``v(T)`` (close to 0) to ``x`` and its action
    is ``||x||_V^2 - ||v(T)||_V^2`` up to the integration defect.
    """
    n_steps = int(round(t_final / dt))
    if n_steps < 2:
        raise ValueError("t_final/dt must give at least two steps")
    integ = Integrator(x.trunc, dt / substeps, "etd-rk2", nonlinear=nonlinear, sign=-1.0)
    a = x.coeffs.copy()
    states = [a.copy()]
    for j in range(n_steps):
        for _ in range(substeps):
            a = integ.advance(a)
        integ.check(a, (j + 1) * dt)
        states.append(a.copy())
    v = np.array(states)
    return DiscretePath(dt * np.arange(n_steps + 1), v[::-1].copy(), x.trunc)


class _LinearPreconditioner:
    """Change of variables that whitens the linear part of the discrete action.

    Per mode with eigenvalue ``lam`` the Hessian of ``(h/2) sum |D_j + lam m_j|^2``
    (counting the conjugate partner) with respect to interior node values is
    ``(2/h) tridiag(-a g, a^2 + g^2, -a g)`` with ``a = 1 + lam h/2`` and
    ``g = 1 - lam h/2``.  With its Cholesky factor ``L`` the optimiser works on
    ``q = L^T u``.
    """

    def __init__(self, lams: np.ndarray, n_int: int, h: float):
        self.groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for lam in np.unique(lams):
            a, g = 1 + lam * h / 2, 1 - lam * h / 2
            band = np.zeros((2, n_int))
            band[0] = (2 / h) * (a * a + g * g)
            band[1, :-1] = (2 / h) * (-a * g)
            low = cholesky_banded(band, lower=True)
            upper = np.zeros_like(low)
            upper[1] = low[0]
            upper[0, 1:] = low[1, :-1]
            self.groups.append((np.nonzero(lams == lam)[0], low, upper))

    def to_states(self, q: np.ndarray) -> np.ndarray:
        q = q.reshape(-1, sum(len(g[0]) for g in self.groups))
        u = np.empty_like(q)
        for cols, _, upper in self.groups:
            u[:, cols] = solve_banded((0, 1), upper, q[:, cols])
        return u

    def to_params(self, u: np.ndarray) -> np.ndarray:
        q = np.empty_like(u)
        for cols, low, _ in self.groups:
            # q = L^T u
            q[:, cols] = low[0][:, None] * u[:, cols]
            q[:-1, cols] += low[1, :-1][:, None] * u[1:, cols]
        return q

    def to_params_grad(self, g: np.ndarray) -> np.ndarray:
        out = np.empty_like(g)
        for cols, low, _ in self.groups:
            out[:, cols] = solve_banded((1, 0), low, g[:, cols])
        return out


def minimize_action(
    x_target: SpectralField,
    t_final: float,
    n_nodes: int,
    init: DiscretePath | None = None,
    x_start: SpectralField | None = None,
    max_iter: int = 5000,
    gtol: float = 1e-8,
    ftol: float = 1e-12,
    nonlinear: bool = True,
) -> tuple[DiscretePath, ActionResult]:
    """Minimise the discrete action over interior nodes with fixed endpoints.

    Uses L-BFGS on the real and imaginary parts of the representative
    coefficients with the adjoint gradient from :func:`action_gradient`.
    Endpoints are ``x_start`` (default 0) and ``x_target``.  The recorded
    per-iteration values are checked to be nonincreasing.  On hitting
    ``max_iter`` the best iterate is returned with ``converged=False``.
    """
    tr = x_target.trunc
    start = x_start.coeffs if x_start is not None else np.zeros(tr.shape, dtype=complex)
    if init is None:
        init = DiscretePath.linear(SpectralField(start, tr), x_target, t_final, n_nodes)
    if len(init) != n_nodes or abs(init.t_final - t_final) > 1e-9 * t_final:
        raise ValueError("initial path does not match t_final / n_nodes")
    dt = init.dt
    states = init.states.copy()
    states[0], states[-1] = start, x_target.coeffs
    ri, rj = tr.rep_index
    n2 = 2 * tr.n_max
    n_int = n_nodes - 2
    pre = _LinearPreconditioner(tr.ksq[ri, rj], n_int, dt)

    def unpack(q: np.ndarray) -> np.ndarray:
        c = pre.to_states(q[: q.size // 2] + 1j * q[q.size // 2 :])
        full = states.copy()
        block = np.zeros((n_int,) + tr.shape, dtype=complex)
        block[:, ri, rj] = c
        block[:, n2 - ri, n2 - rj] = -np.conj(c)
        full[1:-1] = block
        return full

    last: dict[str, object] = {}

    def fun(q: np.ndarray):
        if last.get("q") is not None and np.array_equal(last["q"], q):
            return last["out"]
        val, grad = action_gradient(unpack(q), tr, dt, nonlinear)
        g = pre.to_params_grad(2.0 * grad[1:-1][:, ri, rj]).ravel()
        last["q"], last["out"] = q.copy(), (val, np.concatenate([g.real, g.imag]))
        return last["out"]

    c0 = pre.to_params(states[1:-1][:, ri, rj]).ravel()
    p0 = np.concatenate([c0.real, c0.imag])
    history = [fun(p0)[0]]
    res = minimize(
        fun,
        p0,
        jac=True,
        method="L-BFGS-B",
        callback=lambda q: history.append(fun(q)[0]),
        options={"maxiter": max_iter, "gtol": gtol, "ftol": ftol, "maxcor": 20},
    )
    best = res.x if res.fun <= history[0] else p0
    path = DiscretePath(init.times.copy(), unpack(best), tr)
    result = action_IT(path, nonlinear)
    result.converged = bool(res.success)
    result.history = history
    diffs = np.diff(history)
    if np.any(diffs > 1e-12 * max(1.0, abs(history[0]))):
        raise AssertionError("action increased during minimisation")
    if not res.success:
        log.warning("minimize_action stopped without convergence: %s", res.message)
    return path, result


def control_for_target(
    x: SpectralField,
    lam: float,
    T1: float,
    T2: float,
    dt: float = 1e-3,
    delta: float = 0.2,
    starts: list[SpectralField] | None = None,
    scheme: str = "etd-rk2",
) -> ControlPath:
    """Control that idles for ``T1`` and then follows the reversed flow to ``x``.

    ``phi = 0`` on ``[0, T1]`` lets any start in ``B_H(0, r)`` relax into
    ``B_H(0, lam)``; on ``[T1, T1 + T2]`` ``phi`` is the Hamiltonian of
    :func:`reversed_flow_path`, so the cost is ``||x||_V^2 - ||v(T2)||_V^2``.
    Each start in ``starts`` is replayed; a final distance of ``delta/2`` or
    more raises :class:`ReplayMissError`.
    """
    tr = x.trunc
    n1 = int(round(T1 / dt))
    if quasipotential_exact(x) == 0.0:
        phibar = np.zeros((max(int(round(T2 / dt)), 1),) + tr.shape, dtype=complex)
    else:
        path = reversed_flow_path(x, T2, dt)
        phibar = hamiltonian_of_path(path).states
    controls = np.concatenate([np.zeros((n1,) + tr.shape, dtype=complex), phibar])
    cost = 0.5 * dt * float(np.sum(sobolev_norm(phibar, tr, 0.0) ** 2))
    times = dt * np.arange(len(controls) + 1)
    cp = ControlPath(times=times, controls=controls, cost=cost, trunc=tr, target=x)
    if starts:
        ends, _ = replay_controls(np.array([y.coeffs for y in starts]), controls, dt, tr, scheme)
        cp.replay_distances = [float(d) for d in sobolev_norm(ends - x.coeffs, tr, 0.0)]
        worst = max(cp.replay_distances)
        if worst >= delta / 2:
            raise ReplayMissError(worst, delta / 2)
    return cp
