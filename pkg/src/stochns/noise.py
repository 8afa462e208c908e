"""Spatially coloured noise ``sqrt(eps Q)`` dW with ``Q = (I + delta A^beta)^-1``.

Includes the exactly integrated Ornstein-Uhlenbeck convolution and a
counter-based Gaussian stream so that every draw is a pure function of
``(seed, stream, trajectory, step, lane)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralField, Truncation

__all__ = [
    "CovarianceSpec",
    "NoiseSchedule",
    "RngStream",
    "sigma_k",
    "sigma_array",
    "apply_sqrtQ",
    "trace_Q",
    "p_epsilon",
    "convolution_series_bound",
    "ou_transition",
    "noise_from_normals",
    "ou_exact_step",
    "loglog_slope",
    "guarded_delta_range",
]


@dataclass(frozen=True)
class CovarianceSpec:
    beta: float = 3.0
    delta: float = 1.0

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Correlation law ``delta(eps) = c_delta * eps**theta``."""

    theta: float = 1.0
    c_delta: float = 1.0

    def __post_init__(self) -> None:
        if self.theta <= 0 or self.c_delta <= 0:
            raise ValueError("schedule needs theta > 0 and c_delta > 0")

    def delta(self, epsilon: float) -> float:
        return self.c_delta * epsilon**self.theta

    def spec(self, epsilon: float, beta: float = 3.0) -> CovarianceSpec:
        return CovarianceSpec(beta=beta, delta=self.delta(epsilon))

    def hypotheses(self, beta: float) -> dict[str, bool]:
        """Which joint-scaling conditions hold as ``eps -> 0`` for this law.

        * ``log_condition``: ``eps log(1/delta) -> 0`` (always, for power laws)
        * ``trace_bounded``: ``eps delta^(-1/beta)`` stays bounded
        * ``p_condition``: ``eps delta^(-2/beta) -> 0``
        * ``beta_gt_2``: the smoothing exponent exceeds 2
        """
        return {
            "log_condition": True,
            "trace_bounded": self.theta <= beta,
            "p_condition": self.theta < beta / 2.0,
            "beta_gt_2": beta > 2.0,
        }

    def check_decreasing(self, epsilons) -> bool:
        d = [self.delta(e) for e in epsilons]
        e = list(epsilons)
        return all((e[i] > e[i + 1]) == (d[i] > d[i + 1]) for i in range(len(e) - 1))


def sigma_k(spec: CovarianceSpec, k: tuple[int, int]) -> float:
    k1, k2 = k
    if k1 == 0 and k2 == 0:
        raise ValueError("sigma_k is undefined for the zero wavevector")
    ksq = float(k1 * k1 + k2 * k2)
    return (1.0 + spec.delta * ksq**spec.beta) ** -0.5


def sigma_array(spec: CovarianceSpec, trunc: Truncation) -> np.ndarray:
    """``sigma_k`` on the stored lattice (0 at the centre)."""
    s = np.zeros(trunc.shape)
    m = trunc.mask
    s[m] = (1.0 + spec.delta * trunc.ksq[m] ** spec.beta) ** -0.5
    return s


def apply_sqrtQ(spec: CovarianceSpec, f: SpectralField) -> SpectralField:
    return SpectralField(f.coeffs * sigma_array(spec, f.trunc), f.trunc)


def trace_Q(spec: CovarianceSpec, trunc: Truncation) -> float:
    """``sum_k sigma_k^2`` over retained modes."""
    return math.fsum((sigma_array(spec, trunc) ** 2)[trunc.mask])


def p_epsilon(spec: CovarianceSpec, trunc: Truncation) -> float:
    """``sum_k |k|^2 sigma_k^2``; grows like ``delta^(-2/beta)`` when beta > 2."""
    if spec.beta <= 2:
        warnings.warn(f"beta={spec.beta} <= 2: P_eps is not controlled by delta^(-2/beta)", stacklevel=2)
    s2 = sigma_array(spec, trunc) ** 2
    return math.fsum((trunc.ksq * s2)[trunc.mask])


def convolution_series_bound(spec: CovarianceSpec, trunc: Truncation) -> tuple[float, float]:
    """Truncated series ``sum_k 1/(|k|^2 (1 + delta |k|^(2 beta)))`` and the
    closed-form majorant ``(1/beta) log(1/delta) + 1/beta``.

    Only meaningful for ``0 < delta < 1``.  Callers compare the two values;
    the function itself does not assert the inequality.
    """
    if not 0 < spec.delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {spec.delta}")
    m = trunc.mask
    ksq = trunc.ksq[m]
    series = math.fsum(1.0 / (ksq * (1.0 + spec.delta * ksq**spec.beta)))
    bound = (math.log(1.0 / spec.delta) + 1.0) / spec.beta
    return series, bound


def guarded_delta_range(beta: float, n_max: int) -> float:
    """Smallest delta for which the lattice cut-off does not bend scaling fits.

    Requires ``delta^(-1/(2 beta)) <= n_max / 4``.
    """
    return (n_max / 4.0) ** (-2.0 * beta)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


# ---------------------------------------------------------------------------
# Counter-based Gaussian stream

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; bijective on uint64, wraps modulo 2^64
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _u64(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.int64).astype(np.uint64))


@dataclass(frozen=True)
class RngStream:
    """Gaussian draws addressed by coordinates rather than by call order.

    Identical ``(seed, stream, trajectory, step, lane)`` give identical values,
    so the result of a Monte-Carlo run does not depend on how trajectories are
    grouped into batches or spread across workers.
    """

    seed: int
    stream: int = 0

    def _key(self) -> np.ndarray:
        s = np.atleast_1d(np.asarray(self.seed % 2**64, dtype=np.uint64))
        return _mix(_mix(s) ^ _u64(self.stream))

    def uniforms(self, trajectories, step: int, n: int) -> np.ndarray:
        """Uniform (0, 1] samples of shape ``(len(trajectories), n)``."""
        traj = _u64(trajectories)
        h = _mix(self._key() ^ traj)
        h = _mix(h ^ _u64(step))
        lanes = np.arange(n, dtype=np.uint64)
        z = _mix(h[:, None] ^ lanes[None, :])
        return ((z >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def complex_normals(self, trajectories, step: int, n: int) -> np.ndarray:
        """Standard complex Gaussians (``E|g|^2 = 1``), shape ``(len(trajectories), n)``."""
        u = self.uniforms(trajectories, step, 2 * n)
        r = np.sqrt(-np.log(u[:, 0::2]))
        return r * np.exp(2j * np.pi * u[:, 1::2])

    def normals(self, trajectories, step: int, n: int) -> np.ndarray:
        """Standard real Gaussians via Box-Muller on paired lanes."""
        g = self.complex_normals(trajectories, step, (n + 1) // 2)
        return np.sqrt(2.0) * np.concatenate([g.real, g.imag], axis=1)[:, :n]


# ---------------------------------------------------------------------------
# Exact Ornstein-Uhlenbeck transition


def ou_transition(
    trunc: Truncation, spec: CovarianceSpec, epsilon: float, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode decay ``exp(-|k|^2 dt)`` and increment variance
    ``eps sigma_k^2 (1 - exp(-2|k|^2 dt)) / (2|k|^2)`` (``E|.|^2`` of the complex coefficient)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    lam = trunc.ksq
    decay = np.where(trunc.mask, np.exp(-lam * dt), 0.0)
    s2 = sigma_array(spec, trunc) ** 2
    lam_safe = np.where(trunc.mask, lam, 1.0)
    var = np.where(trunc.mask, epsilon * s2 * (-np.expm1(-2.0 * lam_safe * dt)) / (2.0 * lam_safe), 0.0)
    return decay, var


def noise_from_normals(trunc: Truncation, std: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Place complex normals ``g[..., n_rep]`` on representative modes, scale by
    ``std`` and complete each pair with ``a_{-k} = -conj(a_k)``."""
    ri, rj = trunc.rep_index
    out = np.zeros(g.shape[:-1] + trunc.shape, dtype=complex)
    out[..., ri, rj] = g * std[ri, rj]
    n2 = 2 * trunc.n_max
    out[..., n2 - ri, n2 - rj] = -np.conj(out[..., ri, rj])
    return out


def ou_exact_step(
    z: SpectralField,
    spec: CovarianceSpec,
    epsilon: float,
    dt: float,
    rng: RngStream,
    step: int = 0,
    trajectory: int = 0,
) -> SpectralField:
    """Advance ``dz + Az dt = sqrt(eps Q) dw`` by ``dt``, exact in law."""
    tr = z.trunc
    decay, var = ou_transition(tr, spec, epsilon, dt)
    n_rep = len(tr.rep_index[0])
    g = rng.complex_normals([trajectory], step, n_rep)[0]
    return SpectralField(decay * z.coeffs + noise_from_normals(tr, np.sqrt(var), g), tr)
