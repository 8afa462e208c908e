"""Divergence-free Fourier fields on the 2-torus [0, 2*pi]^2.

A velocity field is stored by its coordinates ``a_k`` in the complex basis

    e_k(x) = (1/2pi) * (k2, -k1)/|k| * exp(i k.x),   k in Z^2 minus (0, 0),

truncated to ``|k|_inf <= n_max``.  Coefficients live in a square array of
shape ``(2*n_max + 1, 2*n_max + 1)`` indexed by ``[k1 + n_max, k2 + n_max]``;
the centre entry (k = 0) is always zero.  Both ``a_k`` and ``a_{-k}`` are
stored and real-valuedness of the physical field is the relation
``a_{-k} = -conj(a_k)`` (because ``e_{-k} = -conj(e_k)``).

Every array-level function accepts leading batch dimensions, which is how the
Monte-Carlo code advances thousands of trajectories at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi

__all__ = [
    "Truncation",
    "SpectralField",
    "basis_eval",
    "enforce_reality",
    "reality_defect",
    "to_grid",
    "from_grid",
    "leray_project",
    "stokes_apply",
    "sobolev_norm",
    "inner",
    "bilinear",
    "nonlinearity",
    "nonlinearity_adjoint",
    "b_form",
    "bilinear_oracle",
    "b_form_oracle",
    "random_field",
    "single_mode",
    "identity_suite",
]


def _fast_grid(n_max: int) -> int:
    return sfft.next_fast_len(3 * n_max + 1, real=True)


@dataclass(frozen=True)
class Truncation:
    """Galerkin truncation ``|k|_inf <= n_max`` and its physical sampling grid.

    ``grid_size`` must exceed ``3 * n_max`` so that quadratic products are
    computed without aliasing onto retained modes (2/3 rule).  When omitted
    the smallest FFT-friendly size satisfying this is used.
    """

    n_max: int
    grid_size: int = 0

    def __post_init__(self) -> None:
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be a positive integer, got {self.n_max!r}")
        if self.grid_size == 0:
            object.__setattr__(self, "grid_size", _fast_grid(self.n_max))
        if self.grid_size < 3 * self.n_max + 1:
            raise ValueError(
                f"grid_size={self.grid_size} aliases quadratic terms onto retained "
                f"modes; need grid_size >= 3*n_max+1 = {3 * self.n_max + 1}"
            )

    @property
    def width(self) -> int:
        return 2 * self.n_max + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.width, self.width)

    @property
    def n_modes(self) -> int:
        return self.width**2 - 1

    @cached_property
    def k1(self) -> np.ndarray:
        n = self.n_max
        return np.broadcast_to(np.arange(-n, n + 1)[:, None], self.shape).astype(float)

    @cached_property
    def k2(self) -> np.ndarray:
        n = self.n_max
        return np.broadcast_to(np.arange(-n, n + 1)[None, :], self.shape).astype(float)

    @cached_property
    def ksq(self) -> np.ndarray:
        """``|k|^2`` with the (excluded) centre entry set to 0."""
        return self.k1**2 + self.k2**2

    @cached_property
    def mask(self) -> np.ndarray:
        """True on retained (nonzero) wavevectors."""
        return self.ksq > 0

    @cached_property
    def kabs_safe(self) -> np.ndarray:
        out = np.sqrt(self.ksq)
        out[~self.mask] = 1.0
        return out

    @cached_property
    def representatives(self) -> np.ndarray:
        """Half-lattice mask: one member of each conjugate pair {k, -k}."""
        return (self.k2 > 0) | ((self.k2 == 0) & (self.k1 > 0))

    @cached_property
    def rep_index(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.representatives)

    def power(self, r: float) -> np.ndarray:
        """Multiplier ``|k|^(2r)`` on retained modes, 0 at the centre."""
        out = np.zeros(self.shape)
        out[self.mask] = self.ksq[self.mask] ** r
        return out

    # -- grid transform tables -------------------------------------------
    @cached_property
    def _rows(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1) % self.grid_size

    @cached_property
    def _velocity_factors(self) -> tuple[np.ndarray, np.ndarray]:
        # Fourier coefficient of (u1, u2) at k per unit a_k, k2 >= 0 half only.
        half = slice(self.n_max, None)
        f1 = self.k2[:, half] / (TWO_PI * self.kabs_safe[:, half])
        f2 = -self.k1[:, half] / (TWO_PI * self.kabs_safe[:, half])
        m = self.mask[:, half]
        return np.where(m, f1, 0.0), np.where(m, f2, 0.0)

    @cached_property
    def grid_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = TWO_PI * np.arange(self.grid_size) / self.grid_size
        return np.meshgrid(x, x, indexing="ij")


@dataclass
class SpectralField:
    """Real divergence-free mean-zero field given by its basis coordinates."""

    coeffs: np.ndarray
    trunc: Truncation = field(repr=False)

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != self.trunc.shape:
            raise ValueError(
                f"coefficient array has shape {self.coeffs.shape}, "
                f"truncation expects {self.trunc.shape}"
            )

    @classmethod
    def zeros(cls, trunc: Truncation) -> "SpectralField":
        return cls(np.zeros(trunc.shape, dtype=complex), trunc)

    def copy(self) -> "SpectralField":
        return SpectralField(self.coeffs.copy(), self.trunc)

    def __getitem__(self, k: tuple[int, int]) -> complex:
        n = self.trunc.n_max
        return complex(self.coeffs[k[0] + n, k[1] + n])

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return SpectralField(self.coeffs + other.coeffs, self.trunc)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return SpectralField(self.coeffs - other.coeffs, self.trunc)

    def __mul__(self, c: float) -> "SpectralField":
        return SpectralField(self.coeffs * c, self.trunc)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(-self.coeffs, self.trunc)

    def norm(self, r: float = 0.0) -> float:
        return float(sobolev_norm(self.coeffs, self.trunc, r))

    def is_real(self, tol: float = 1e-12) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.coeffs))))
        return reality_defect(self.coeffs) <= tol * scale


def _check_same(u: SpectralField, v: SpectralField) -> None:
    if u.trunc != v.trunc:
        raise ValueError(f"truncation mismatch: {u.trunc} vs {v.trunc}")


def _coeffs(u) -> np.ndarray:
    return u.coeffs if isinstance(u, SpectralField) else np.asarray(u)


# ---------------------------------------------------------------------------
# Basis and reality constraint


def basis_eval(k: tuple[int, int], x: tuple[float, float]) -> np.ndarray:
    """Value of the basis vector ``e_k`` at ``x = (x1, x2)``.

    ``x1`` and ``x2`` may be arrays; the result has shape ``(2,) + x1.shape``.
    """
    k1, k2 = int(k[0]), int(k[1])
    if k1 == 0 and k2 == 0:
        raise ValueError("e_k is undefined for the zero wavevector")
    kabs = np.hypot(k1, k2)
    phase = np.exp(1j * (k1 * np.asarray(x[0]) + k2 * np.asarray(x[1])))
    return np.stack([k2 * phase, -k1 * phase]) / (TWO_PI * kabs)


def enforce_reality(a: np.ndarray) -> np.ndarray:
    """Project coefficients onto the real-field subspace ``a_{-k} = -conj(a_k)``.

    The result satisfies the relation bit-exactly.
    """
    a = np.asarray(a)
    return 0.5 * (a - np.conj(a[..., ::-1, ::-1]))


def reality_defect(a: np.ndarray) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a + np.conj(a[..., ::-1, ::-1])), initial=0.0))


# ---------------------------------------------------------------------------
# Physical grid transforms


def _half_to_grid(spec_half, trunc: Truncation) -> np.ndarray:
    """Inverse real FFT of coefficients given on the ``k2 >= 0`` half lattice.

    ``spec_half`` is an array or a list of same-shaped arrays; a list is
    stacked along a new axis at position -3 without an intermediate copy.
    """
    n, N = trunc.n_max, trunc.grid_size
    parts = spec_half if isinstance(spec_half, list) else None
    lead = parts[0].shape[:-2] + (len(parts),) if parts else spec_half.shape[:-2]
    F = np.zeros(lead + (N, N // 2 + 1), dtype=complex)
    n1 = 2 * n + 1
    if parts:
        for i, p in enumerate(parts):
            F[..., i, : n + 1, : n + 1] = p[..., n:, :]
            F[..., i, N - n :, : n + 1] = p[..., :n, :]
    else:
        F[..., : n + 1, : n + 1] = spec_half[..., n:n1, :]
        F[..., N - n :, : n + 1] = spec_half[..., :n, :]
    return sfft.irfft2(F, s=(N, N), norm="forward")


def to_grid(u, trunc: Truncation | None = None) -> np.ndarray:
    """Sample the velocity on the ``grid_size x grid_size`` torus grid.

    Returns an array of shape ``(..., 2, N, N)`` holding (u1, u2).
    """
    trunc = trunc or u.trunc
    a = _coeffs(u)[..., :, trunc.n_max :]
    f1, f2 = trunc._velocity_factors
    return _half_to_grid([a * f1, a * f2], trunc)


def _project_fourier(F1: np.ndarray, F2: np.ndarray, trunc: Truncation) -> np.ndarray:
    """Coordinates ``<f, e_k>`` from Fourier coefficients of (f1, f2), k2 >= 0 half."""
    n = trunc.n_max
    half = slice(n, None)
    k1, k2 = trunc.k1[:, half], trunc.k2[:, half]
    a_half = TWO_PI * (k2 * F1 - k1 * F2) / trunc.kabs_safe[:, half]
    a_half = np.where(trunc.mask[:, half], a_half, 0.0)
    a = np.zeros(a_half.shape[:-2] + trunc.shape, dtype=complex)
    a[..., :, half] = a_half
    a[..., :, :n] = -np.conj(a_half[..., ::-1, :0:-1])
    return enforce_reality(a)


def from_grid(f: np.ndarray, trunc: Truncation) -> np.ndarray:
    """Leray projection of grid samples ``f[..., 2, N, N]`` onto retained modes."""
    f = np.asarray(f, dtype=float)
    N = f.shape[-1]
    if f.shape[-3:] != (2, N, N):
        raise ValueError(f"expected grid field of shape (..., 2, N, N), got {f.shape}")
    n = trunc.n_max
    if N < 2 * n + 1:
        raise ValueError(f"grid of size {N} cannot resolve n_max={n}")
    F = sfft.rfft2(f, norm="forward")
    rows = np.arange(-n, n + 1) % N
    F = F[..., rows, : n + 1]
    return _project_fourier(F[..., 0, :, :], F[..., 1, :, :], trunc)


def leray_project(f: np.ndarray, trunc: Truncation) -> SpectralField:
    """Project a real vector field sampled on a uniform grid onto ``span{e_k}``.

    Gradients and constants are annihilated; divergence-free trigonometric
    fields within the truncation are reproduced.
    """
    return SpectralField(from_grid(f, trunc), trunc)


# ---------------------------------------------------------------------------
# Linear operators and norms


def stokes_apply(u, power: float = 1.0, trunc: Truncation | None = None):
    """Fractional Stokes operator ``A^power``: multiply ``a_k`` by ``|k|^(2 power)``."""
    if isinstance(u, SpectralField):
        return SpectralField(u.coeffs * u.trunc.power(power), u.trunc)
    return np.asarray(u) * trunc.power(power)


def sobolev_norm(u, trunc: Truncation | None = None, r: float = 0.0):
    """``sqrt(sum_k |k|^(2r) |a_k|^2)`` over the full stored lattice."""
    if isinstance(u, SpectralField):
        trunc = u.trunc
    a = _coeffs(u)
    return np.sqrt(np.sum(trunc.power(r) * (a.real**2 + a.imag**2), axis=(-2, -1)))


def inner(u, v) -> np.ndarray:
    """Real H inner product ``<u, v>_H`` (batched)."""
    a, b = _coeffs(u), _coeffs(v)
    return np.sum(a.real * b.real + a.imag * b.imag, axis=(-2, -1))


# ---------------------------------------------------------------------------
# Nonlinearity


def _grad_grid(a: np.ndarray, trunc: Truncation) -> np.ndarray:
    """Grid samples of ``d_j v_i``, returned as (..., 4, N, N) ordered
    (d1 v1, d2 v1, d1 v2, d2 v2)."""
    n = trunc.n_max
    ah = a[..., :, n:]
    f1, f2 = trunc._velocity_factors
    ik1 = 1j * trunc.k1[:, n:]
    ik2 = 1j * trunc.k2[:, n:]
    v1, v2 = ah * f1, ah * f2
    return _half_to_grid([ik1 * v1, ik2 * v1, ik1 * v2, ik2 * v2], trunc)


def _project_stacked(g: np.ndarray, trunc: Truncation) -> np.ndarray:
    n = trunc.n_max
    F = sfft.rfft2(g, norm="forward")
    F = F[..., trunc._rows, : n + 1]
    return _project_fourier(F[..., 0, :, :], F[..., 1, :, :], trunc)


def _project_grid(g1: np.ndarray, g2: np.ndarray, trunc: Truncation) -> np.ndarray:
    return _project_stacked(np.stack([g1, g2], axis=-3), trunc)


def bilinear(u, v, trunc: Truncation | None = None):
    """``B(u, v) = P[(u . grad) v]``, dealiased pseudo-spectral evaluation."""
    if isinstance(u, SpectralField):
        _check_same(u, v)
        return SpectralField(bilinear(u.coeffs, v.coeffs, u.trunc), u.trunc)
    a, b = np.asarray(u), np.asarray(v)
    ug = to_grid(a, trunc)
    dv = _grad_grid(b, trunc)
    u1, u2 = ug[..., 0, :, :], ug[..., 1, :, :]
    g1 = u1 * dv[..., 0, :, :] + u2 * dv[..., 1, :, :]
    g2 = u1 * dv[..., 2, :, :] + u2 * dv[..., 3, :, :]
    return _project_grid(g1, g2, trunc)


def nonlinearity(u, trunc: Truncation | None = None):
    """``B(u) = B(u, u)`` in rotational form ``P[omega * (-u2, u1)]``.

    On the torus ``(u.grad)u - omega*(-u2, u1)`` is a gradient, which the
    Leray projection removes, so this equals ``bilinear(u, u)`` while needing
    three inverse transforms instead of five.
    """
    if isinstance(u, SpectralField):
        return SpectralField(nonlinearity(u.coeffs, u.trunc), u.trunc)
    a = np.asarray(u)
    n = trunc.n_max
    ah = a[..., :, n:]
    f1, f2 = trunc._velocity_factors
    w = -1j * ah * np.sqrt(trunc.ksq[:, n:]) / TWO_PI
    g = _half_to_grid([ah * f1, ah * f2, w], trunc)
    u1, u2, om = g[..., 0, :, :], g[..., 1, :, :], g[..., 2, :, :]
    prod = np.empty(g.shape[:-3] + (2,) + g.shape[-2:])
    np.multiply(om, u2, out=prod[..., 0, :, :])
    np.negative(prod[..., 0, :, :], out=prod[..., 0, :, :])
    np.multiply(om, u1, out=prod[..., 1, :, :])
    return _project_stacked(prod, trunc)


def nonlinearity_adjoint(u, lam, trunc: Truncation | None = None):
    """Adjoint of the linearisation of ``B`` at ``u`` applied to ``lam``.

    ``DB(u)^T lam = -B(u, lam) + P[(grad u)^T lam]`` where the second term has
    components ``sum_j lam_j d_i u_j``.
    """
    if isinstance(u, SpectralField):
        return SpectralField(nonlinearity_adjoint(u.coeffs, lam.coeffs, u.trunc), u.trunc)
    a, l = np.asarray(u), np.asarray(lam)
    ug = to_grid(a, trunc)
    lg = to_grid(l, trunc)
    du = _grad_grid(a, trunc)
    dl = _grad_grid(l, trunc)
    u1, u2 = ug[..., 0, :, :], ug[..., 1, :, :]
    l1, l2 = lg[..., 0, :, :], lg[..., 1, :, :]
    # -(u.grad)lam + (grad u)^T lam
    g1 = -(u1 * dl[..., 0, :, :] + u2 * dl[..., 1, :, :]) + l1 * du[..., 0, :, :] + l2 * du[..., 2, :, :]
    g2 = -(u1 * dl[..., 2, :, :] + u2 * dl[..., 3, :, :]) + l1 * du[..., 1, :, :] + l2 * du[..., 3, :, :]
    return _project_grid(g1, g2, trunc)


def b_form(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    """Trilinear form ``b(u, v, w) = int (u . grad) v . w dx``."""
    _check_same(u, v)
    _check_same(u, w)
    return float(inner(bilinear(u.coeffs, v.coeffs, u.trunc), w.coeffs))


# ---------------------------------------------------------------------------
# Direct convolution oracle


def _velocity_hat(a: np.ndarray, trunc: Truncation) -> np.ndarray:
    """Fourier coefficients of (u1, u2) on the full lattice, shape (2, W, W)."""
    ks = trunc.kabs_safe
    m = trunc.mask
    return np.stack(
        [np.where(m, a * trunc.k2 / (TWO_PI * ks), 0), np.where(m, -a * trunc.k1 / (TWO_PI * ks), 0)]
    )


def bilinear_oracle(u: SpectralField, v: SpectralField) -> SpectralField:
    """``B(u, v)`` by explicit summation over all mode pairs ``p + q = k``.

    O(M^2) in the number of modes and independent of any FFT; used to check
    the pseudo-spectral path.
    """
    _check_same(u, v)
    tr = u.trunc
    n, W = tr.n_max, tr.width
    uh = _velocity_hat(u.coeffs, tr).reshape(2, -1)
    vh = _velocity_hat(v.coeffs, tr).reshape(2, -1)
    k1 = tr.k1.ravel().astype(int)
    k2 = tr.k2.ravel().astype(int)
    # (u.grad v)^_k = sum_{p+q=k} (u_p . i q) v_q
    udotq = uh[0][:, None] * (1j * k1[None, :]) + uh[1][:, None] * (1j * k2[None, :])
    s1 = k1[:, None] + k1[None, :]
    s2 = k2[:, None] + k2[None, :]
    keep = (np.abs(s1) <= n) & (np.abs(s2) <= n)
    idx = ((s1 + n) * W + (s2 + n))[keep]
    g = np.zeros((2, W * W), dtype=complex)
    for c in range(2):
        contrib = (udotq * vh[c][None, :])[keep]
        np.add.at(g[c], idx, contrib)
    g = g.reshape(2, W, W)
    a = TWO_PI * (tr.k2 * g[0] - tr.k1 * g[1]) / tr.kabs_safe
    return SpectralField(np.where(tr.mask, a, 0.0), tr)


def b_form_oracle(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    """Trilinear form via the direct convolution, ``4 pi^2 sum_k conj(w^_k).(u.grad v)^_k``."""
    _check_same(u, w)
    return float(inner(bilinear_oracle(u, v).coeffs, w.coeffs))


# ---------------------------------------------------------------------------
# Constructors


def random_field(
    trunc: Truncation,
    rng: np.random.Generator,
    slope: float = 0.0,
    norm: float | None = None,
    r: float = 0.0,
) -> SpectralField:
    """Random real field with ``E|a_k|^2`` proportional to ``|k|^(-2 slope)``.

    If ``norm`` is given the field is rescaled to have that ``V^r`` norm.
    """
    a = rng.standard_normal(trunc.shape) + 1j * rng.standard_normal(trunc.shape)
    a = enforce_reality(a * trunc.power(-slope / 2.0))
    u = SpectralField(a, trunc)
    if norm is not None:
        u = u * (norm / u.norm(r))
    return u


def single_mode(trunc: Truncation, k: tuple[int, int], amplitude: complex = 1.0) -> SpectralField:
    """Reality pair with ``a_k = amplitude`` and ``a_{-k} = -conj(amplitude)``."""
    n = trunc.n_max
    k1, k2 = k
    if (k1, k2) == (0, 0) or max(abs(k1), abs(k2)) > n:
        raise ValueError(f"wavevector {k} is not a retained mode for n_max={n}")
    a = np.zeros(trunc.shape, dtype=complex)
    a[k1 + n, k2 + n] = amplitude
    a[-k1 + n, -k2 + n] = -np.conj(amplitude)
    return SpectralField(a, trunc)


# ---------------------------------------------------------------------------
# Identity suite


def identity_suite(n_max: int = 8, n_fields: int = 100, oracle_n_max: int = 4, seed: int = 0) -> dict[str, float]:
    """Worst relative defects of the structural identities over random fields.

    * ``enstrophy``: ``|<B(u), Au>| / (||B(u)|| ||Au||)``
    * ``antisymmetry``: ``|b(u,v,w) + b(u,w,v)| / (|b(u,v,w)| + |b(u,w,v)|)``
    * ``energy``: ``|<B(u), u>| / (||B(u)|| ||u||)``
    * ``oracle``: ``||B_fast(u, v) - B_direct(u, v)|| / ||B_direct(u, v)||``
      at ``oracle_n_max``
    * ``reality``: largest reality-relation violation of ``B(u)``
    """
    rng = np.random.default_rng(seed)
    tr = Truncation(n_max)
    u = np.array([random_field(tr, rng, slope=1.0).coeffs for _ in range(n_fields)])
    v = np.array([random_field(tr, rng, slope=1.0).coeffs for _ in range(n_fields)])
    w = np.array([random_field(tr, rng, slope=1.0).coeffs for _ in range(n_fields)])
    bu = nonlinearity(u, tr)
    au = stokes_apply(u, 1.0, tr)
    ens = np.abs(inner(bu, au)) / (sobolev_norm(bu, tr) * sobolev_norm(au, tr))
    en = np.abs(inner(bu, u)) / (sobolev_norm(bu, tr) * sobolev_norm(u, tr))
    b1 = inner(bilinear(u, v, tr), w)
    b2 = inner(bilinear(u, w, tr), v)
    anti = np.abs(b1 + b2) / (np.abs(b1) + np.abs(b2))
    to = Truncation(oracle_n_max)
    worst_oracle = 0.0
    for _ in range(min(n_fields, 10)):
        p, q = random_field(to, rng), random_field(to, rng)
        ref = bilinear_oracle(p, q)
        diff = (bilinear(p, q) - ref).norm() / ref.norm()
        worst_oracle = max(worst_oracle, float(diff))
    return {
        "enstrophy": float(ens.max()),
        "antisymmetry": float(anti.max()),
        "energy": float(en.max()),
        "oracle": worst_oracle,
        "reality": reality_defect(bu),
    }
