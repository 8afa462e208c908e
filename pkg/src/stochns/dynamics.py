"""Exponential integrators for stochastic, controlled and unforced Navier-Stokes.

All schemes treat ``-A`` and the Ornstein-Uhlenbeck convolution exactly per
mode and the nonlinearity explicitly:

    exp-euler:  u+ = E u + dt phi1 N(u) + xi
    etd-rk2:    a  = E u + dt phi1 N(u)
                u+ = a + dt phi2 (N(a) - N(u)) + xi

with ``E = exp(-|k|^2 dt)``, ``N(u) = -B(u) + forcing`` and ``xi`` the exact
OU increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .noise import CovarianceSpec, RngStream, noise_from_normals, ou_transition
from .spectral import SpectralField, Truncation, nonlinearity, random_field, sobolev_norm

__all__ = [
    "BlowUpError",
    "SolverConfig",
    "DiscretePath",
    "Integrator",
    "step_stochastic",
    "step_controlled",
    "simulate",
    "solve_controlled",
    "replay_controls",
    "solve_Fx",
    "decay_time",
]

SCHEMES = ("exp-euler", "etd-rk2")
BLOWUP_NORM = 1e6


class BlowUpError(FloatingPointError):
    """Raised when a state leaves the guard ball or stops being finite."""

    def __init__(self, message: str, state: np.ndarray | None = None, time: float | None = None):
        super().__init__(message)
        self.state = state
        self.time = time


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    t_final: float = 1.0
    scheme: str = "exp-euler"
    record_stride: int = 1

    def __post_init__(self) -> None:
        if not self.dt > 0 or not self.t_final > 0:
            raise ValueError("dt and t_final must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.record_stride < 1:
            raise ValueError("record_stride must be a positive integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def stiffness(self, trunc: Truncation) -> float:
        """``dt |k_max|^2``; informational, the linear part is integrated exactly."""
        return self.dt * 2 * trunc.n_max**2


@dataclass
class DiscretePath:
    """States ``u(t_j)`` on a uniform grid ``t_j = t_0 + j dt``."""

    times: np.ndarray
    states: np.ndarray
    trunc: Truncation = field(repr=False)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=complex)
        if self.states.shape != (len(self.times),) + self.trunc.shape:
            raise ValueError(
                f"states of shape {self.states.shape} do not match {len(self.times)} times "
                f"and truncation {self.trunc.shape}"
            )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        steps = np.diff(self.times)
        if len(steps) == 0:
            raise ValueError("a path needs at least two nodes to define dt")
        if np.max(np.abs(steps - steps[0])) > 1e-12 * max(1.0, abs(steps[0])):
            raise ValueError("time grid is not uniform")
        if steps[0] <= 0:
            raise ValueError("time grid must be increasing")
        return float(steps[0])

    @property
    def t_final(self) -> float:
        return float(self.times[-1] - self.times[0])

    def state(self, j: int) -> SpectralField:
        return SpectralField(self.states[j], self.trunc)

    @property
    def start(self) -> SpectralField:
        return self.state(0)

    @property
    def end(self) -> SpectralField:
        return self.state(-1)

    def norms(self, r: float = 0.0) -> np.ndarray:
        return sobolev_norm(self.states, self.trunc, r)

    def reversed(self) -> "DiscretePath":
        """``u(t) -> u(T - t)`` on the same time grid."""
        return DiscretePath(self.times.copy(), self.states[::-1].copy(), self.trunc)

    def concat(self, other: "DiscretePath") -> "DiscretePath":
        """Join two paths sharing the node ``self.end == other.start``.

        The shared node appears once; ``other`` is shifted in time so that it
        starts where ``self`` ends.
        """
        if other.trunc != self.trunc:
            raise ValueError("truncation mismatch")
        if not np.allclose(self.states[-1], other.states[0], atol=1e-12, rtol=0):
            raise ValueError("paths do not share their junction node")
        t = np.concatenate([self.times, other.times[1:] - other.times[0] + self.times[-1]])
        s = np.concatenate([self.states, other.states[1:]])
        return DiscretePath(t, s, self.trunc)

    def slice(self, start: int, stop: int) -> "DiscretePath":
        return DiscretePath(self.times[start:stop], self.states[start:stop], self.trunc)

    @classmethod
    def linear(cls, x0: SpectralField, x1: SpectralField, t_final: float, n_nodes: int) -> "DiscretePath":
        """Straight segment from ``x0`` to ``x1`` with ``n_nodes`` nodes."""
        s = np.linspace(0.0, 1.0, n_nodes)[:, None, None]
        states = (1 - s) * x0.coeffs + s * x1.coeffs
        return cls(np.linspace(0.0, t_final, n_nodes), states, x0.trunc)


def _phi_functions(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    phi1 = np.where(small, 1 - z / 2 + z**2 / 6, -np.expm1(-zs) / zs)
    phi2 = np.where(small, 0.5 - z / 6 + z**2 / 24, (np.expm1(-zs) + zs) / zs**2)
    return phi1, phi2


class Integrator:
    """Precomputed per-mode coefficients for one ``(truncation, dt, scheme)``.

    ``advance`` operates on raw coefficient arrays with arbitrary leading
    batch dimensions.  ``nonlinear=False`` drops ``B`` (Stokes / OU dynamics);
    ``sign=-1`` integrates ``u' = -Au + B(u)`` instead of ``u' = -Au - B(u)``.
    """

    def __init__(
        self,
        trunc: Truncation,
        dt: float,
        scheme: str = "exp-euler",
        nonlinear: bool = True,
        sign: float = 1.0,
    ):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.trunc = trunc
        self.dt = float(dt)
        self.scheme = scheme
        self.nonlinear = nonlinear
        self.sign = float(sign)
        z = trunc.ksq * self.dt
        phi1, phi2 = _phi_functions(z)
        m = trunc.mask
        self.decay = np.where(m, np.exp(-z), 0.0)
        self.c1 = np.where(m, self.dt * phi1, 0.0)
        self.c2 = np.where(m, self.dt * phi2, 0.0)

    def drift(self, a: np.ndarray, forcing: np.ndarray | None = None) -> np.ndarray:
        out = -self.sign * nonlinearity(a, self.trunc) if self.nonlinear else np.zeros_like(a)
        if forcing is not None:
            out = out + forcing
        return out

    def advance(
        self,
        a: np.ndarray,
        forcing: np.ndarray | None = None,
        noise: np.ndarray | None = None,
        shift: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> np.ndarray:
        """One step.  ``shift=(z_now, z_next)`` evaluates ``B(u + z)`` instead of ``B(u)``."""
        if shift is None:
            n0 = self.drift(a, forcing)
        else:
            n0 = self.drift(a + shift[0], forcing)
        out = self.decay * a + self.c1 * n0
        if self.scheme == "etd-rk2":
            arg = out if shift is None else out + shift[1]
            out = out + self.c2 * (self.drift(arg, forcing) - n0)
        if noise is not None:
            out = out + noise
        return out

    def check(self, a: np.ndarray, time: float | None = None) -> None:
        norms = sobolev_norm(a, self.trunc, 0.0)
        if not np.all(np.isfinite(norms)) or np.any(norms > BLOWUP_NORM):
            raise BlowUpError(
                f"state norm {np.max(norms):.3e} left the guard ball at t={time}", state=a, time=time
            )


class NoiseSource:
    """Exact OU increments for a fixed ``(spec, epsilon, dt)``, addressed by coordinates."""

    def __init__(self, trunc: Truncation, spec: CovarianceSpec, epsilon: float, dt: float, rng: RngStream):
        self.trunc = trunc
        self.rng = rng
        _, var = ou_transition(trunc, spec, epsilon, dt)
        self.std = np.sqrt(var)
        self.n_rep = len(trunc.rep_index[0])
        self.active = epsilon > 0

    def __call__(self, trajectories, step: int) -> np.ndarray | None:
        if not self.active:
            return None
        g = self.rng.complex_normals(trajectories, step, self.n_rep)
        return noise_from_normals(self.trunc, self.std, g)


def step_stochastic(
    u: SpectralField,
    spec: CovarianceSpec,
    epsilon: float,
    dt: float,
    rng: RngStream,
    step: int = 0,
    trajectory: int = 0,
    scheme: str = "exp-euler",
    nonlinear: bool = True,
) -> SpectralField:
    """One step of ``du + (Au + B(u)) dt = sqrt(eps Q) dw``."""
    integ = Integrator(u.trunc, dt, scheme, nonlinear)
    noise = NoiseSource(u.trunc, spec, epsilon, dt, rng)([trajectory], step)
    a = integ.advance(u.coeffs[None], noise=noise)
    integ.check(a)
    return SpectralField(a[0], u.trunc)


def step_controlled(
    u: SpectralField,
    phi: SpectralField | None,
    dt: float,
    scheme: str = "exp-euler",
    nonlinear: bool = True,
) -> SpectralField:
    """One step of ``u' + Au + B(u) = phi`` with ``phi`` held constant over the step."""
    integ = Integrator(u.trunc, dt, scheme, nonlinear)
    a = integ.advance(u.coeffs, forcing=None if phi is None else phi.coeffs)
    integ.check(a)
    return SpectralField(a, u.trunc)


def simulate(
    x: SpectralField,
    config: SolverConfig,
    spec: CovarianceSpec | None = None,
    epsilon: float = 0.0,
    rng: RngStream | None = None,
    trajectory: int = 0,
    nonlinear: bool = True,
) -> DiscretePath:
    """Integrate one trajectory from ``x``, recording every ``record_stride`` steps."""
    tr = x.trunc
    integ = Integrator(tr, config.dt, config.scheme, nonlinear)
    noise = None
    if epsilon > 0:
        if spec is None or rng is None:
            raise ValueError("stochastic runs need a CovarianceSpec and an RngStream")
        noise = NoiseSource(tr, spec, epsilon, config.dt, rng)
    a = x.coeffs[None].copy()
    times, states = [0.0], [a[0].copy()]
    for j in range(config.n_steps):
        a = integ.advance(a, noise=None if noise is None else noise([trajectory], j))
        integ.check(a, (j + 1) * config.dt)
        if (j + 1) % config.record_stride == 0:
            times.append((j + 1) * config.dt)
            states.append(a[0].copy())
    return DiscretePath(np.array(times), np.array(states), tr)


def solve_controlled(
    x: SpectralField,
    controls: np.ndarray,
    dt: float,
    scheme: str = "exp-euler",
    nonlinear: bool = True,
) -> DiscretePath:
    """Replay piecewise-constant controls ``controls[j]`` on ``[j dt, (j+1) dt)``.

    ``controls`` has shape ``(n_steps, W, W)``.
    """
    tr = x.trunc
    end, states = replay_controls(x.coeffs, controls, dt, tr, scheme, nonlinear, keep=True)
    return DiscretePath(dt * np.arange(len(states)), states, tr)


def replay_controls(
    a0: np.ndarray,
    controls: np.ndarray,
    dt: float,
    trunc: Truncation,
    scheme: str = "exp-euler",
    nonlinear: bool = True,
    keep: bool = False,
):
    """Batched replay on raw arrays; ``a0`` may carry leading batch dimensions.

    Returns the final state and, with ``keep=True``, the stacked trajectory.
    """
    controls = np.asarray(controls, dtype=complex)
    integ = Integrator(trunc, dt, scheme, nonlinear)
    a = np.array(a0, dtype=complex)
    states = [a.copy()] if keep else None
    for j, phi in enumerate(controls):
        a = integ.advance(a, forcing=phi)
        if j % 100 == 99 or j == len(controls) - 1:
            integ.check(a, (j + 1) * dt)
        if keep:
            states.append(a.copy())
    return a, (np.array(states) if keep else None)


def solve_Fx(x: SpectralField, z: DiscretePath, scheme: str = "exp-euler") -> DiscretePath:
    """Solve ``du + Au dt + B(u + z) dt = 0``, ``u(0) = x`` on the grid of ``z``.

    With ``z`` the OU convolution, ``v + z`` is the stochastic solution driven
    by the same noise; with ``z = 0`` it is the unforced flow.
    """
    if z.trunc != x.trunc:
        raise ValueError("truncation mismatch between x and z")
    dt = z.dt
    integ = Integrator(x.trunc, dt, scheme)
    a = x.coeffs.copy()
    states = [a.copy()]
    for j in range(len(z) - 1):
        a = integ.advance(a, shift=(z.states[j], z.states[j + 1]))
        integ.check(a, z.times[j + 1])
        states.append(a.copy())
    return DiscretePath(z.times.copy(), np.array(states), x.trunc)


def decay_time(
    radius_r: float,
    lam: float,
    n_samples: int,
    trunc: Truncation | None = None,
    dt: float = 1e-2,
    t_max: float = 50.0,
    seed: int = 0,
    nonlinear: bool = True,
    safety: float = 2.0,
) -> float:
    """Time after which unforced solutions from ``B_H(0, r)`` are inside ``B_H(0, lam)``.

    Samples ``n_samples`` random starts on the sphere of radius ``r`` (plus the
    slowest single mode ``k = (1, 0)``), takes the last first-passage time
    below ``lam`` and multiplies it by ``safety``.  Since
    ``||u(t)||_H <= exp(-t) ||x||_H`` for every start, the result is capped at
    ``log(r / lam)``, which is a guaranteed horizon.
    """
    if radius_r <= 0 or lam <= 0:
        raise ValueError("radius_r and lam must be positive")
    if lam >= radius_r:
        return 0.0
    trunc = trunc or Truncation(4)
    rng = np.random.default_rng(seed)
    starts = [random_field(trunc, rng, norm=radius_r).coeffs for _ in range(n_samples)]
    slow = np.zeros(trunc.shape, dtype=complex)
    n = trunc.n_max
    slow[n + 1, n], slow[n - 1, n] = radius_r / np.sqrt(2), -radius_r / np.sqrt(2)
    starts.append(slow)
    a = np.array(starts)
    integ = Integrator(trunc, dt, "etd-rk2", nonlinear)
    below = np.full(len(a), np.nan)
    t = 0.0
    while np.any(np.isnan(below)):
        if t >= t_max:
            raise RuntimeError(f"solutions did not enter B_H(0, {lam}) before t_max={t_max}")
        a = integ.advance(a)
        t += dt
        norms = sobolev_norm(a, trunc, 0.0)
        newly = np.isnan(below) & (norms < lam)
        below[newly] = t
    return float(min(safety * np.max(below), np.log(radius_r / lam)))
