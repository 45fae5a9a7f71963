"""Spectral representation of periodic vector fields on the torus [0, M)^d.

Conventions (used consistently everywhere in this package):

* Fourier basis e_k(x) = exp(2*pi*i*k.x) with wavevectors k in (1/M)Z^d.
  We index modes by the integer vector kappa = M*k, stored on the centred
  cube kappa in [-h, h]^d with m = 2h+1 modes per axis, laid out in FFT
  order (0, 1, ..., h, -h, ..., -1) along each axis.
* Forward transform: phihat(k) = integral over [0,M)^d of phi(x) e_{-k}(x) dx,
  approximated exactly for band-limited fields by (M/n)^d times the FFT of
  the n^d-point sample grid.
* Inverse transform: phi(x) = M^{-d} sum_k phihat(k) e_k(x), i.e. (n/M)^d
  times the inverse FFT of the zero-padded coefficient box.
* Inner product (Parseval): <phi, psi> = M^{-d} sum_k phihat(k) psihat(-k).

Real-valued fields satisfy phihat(-k) = conj(phihat(k)); the module never
exploits that silently except in the documented `*_real` fast paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft


@dataclass(frozen=True)
class WaveGrid:
    """Wavevector bookkeeping for a d-dimensional torus of side M.

    Args:
      d: spatial dimension (2 or 3).
      M: torus side length (positive real; wavevectors live on (1/M)Z^d).
      modes_per_axis: odd count m = 2h+1 of retained integer mode indices
        per axis, so kappa ranges over [-h, h].
      physical_points_per_axis: collocation grid size n >= m.
    """

    d: int
    M: float
    modes_per_axis: int
    physical_points_per_axis: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if self.M <= 0:
            raise ValueError("torus side M must be positive")
        if self.modes_per_axis < 3 or self.modes_per_axis % 2 == 0:
            raise ValueError("modes_per_axis must be odd and >= 3")
        if self.physical_points_per_axis < self.modes_per_axis:
            raise ValueError("physical_points_per_axis must be >= modes_per_axis")

    @property
    def h(self) -> int:
        """Largest retained integer mode index per axis."""
        return (self.modes_per_axis - 1) // 2

    @property
    def box_shape(self) -> tuple[int, ...]:
        return (self.modes_per_axis,) * self.d

    @cached_property
    def kappa_axis(self) -> np.ndarray:
        """Integer mode indices along one axis in FFT order."""
        h = self.h
        return np.concatenate([np.arange(0, h + 1), np.arange(-h, 0)])

    @cached_property
    def kappa_mesh(self) -> np.ndarray:
        """Integer mode mesh, shape (d,) + box_shape."""
        axes = np.meshgrid(*([self.kappa_axis] * self.d), indexing="ij")
        return np.stack(axes).astype(np.float64)

    @cached_property
    def abs2_kappa(self) -> np.ndarray:
        """Squared integer mode radius |kappa|^2 on the box (exact integers)."""
        return np.sum(self.kappa_mesh**2, axis=0)

    @cached_property
    def k_abs(self) -> np.ndarray:
        """Euclidean wavenumber |k| = |kappa|/M on the box."""
        return np.sqrt(self.abs2_kappa) / self.M

    @cached_property
    def _crop_index(self) -> np.ndarray:
        """FFT output indices that hold the retained modes of one axis."""
        h, n = self.h, self.physical_points_per_axis
        return np.concatenate([np.arange(0, h + 1), np.arange(n - h, n)])

    @cached_property
    def divfree_basis_mesh(self) -> np.ndarray:
        """Orthonormal divergence-free directions per mode, shape (d-1, d) + box.

        Zero at kappa = 0.  The outer-product sum over directions equals the
        Leray multiplier at every nonzero mode.
        """
        kap = self.kappa_mesh
        norm = np.sqrt(self.abs2_kappa)
        with np.errstate(invalid="ignore", divide="ignore"):
            khat = np.where(norm > 0, kap / norm, 0.0)
        if self.d == 2:
            v = np.stack([-khat[1], khat[0]])
            return v[np.newaxis]
        # d = 3: steal the axis where |khat| is smallest, project it off khat,
        # normalize, and complete with the cross product.
        ref = np.argmin(np.abs(kap), axis=0)  # ties resolve to the lowest axis
        e_ref = (np.arange(3)[:, None, None, None] == ref[None]).astype(np.float64)
        khat_ref = np.take_along_axis(khat, ref[None], axis=0)[0]
        w = e_ref - khat_ref * khat
        wnorm = np.sqrt(np.sum(w**2, axis=0))
        with np.errstate(invalid="ignore", divide="ignore"):
            v1 = np.where(wnorm > 0, w / wnorm, 0.0)
        v2 = np.cross(khat, v1, axisa=0, axisb=0, axisc=0)
        out = np.stack([v1, v2])
        out[..., 0, 0, 0] = 0.0
        return out


@dataclass
class SpectralField:
    """A field stored by Fourier coefficients on the mode box of a WaveGrid.

    coeffs has shape (components,) + grid.box_shape, complex dtype.  Velocity
    fields have components == grid.d; tensor-valued fields (e.g. a stress)
    flatten their index pairs row-major into the leading axis.

    The flags record what the producer guarantees; `validate` checks them.
    """

    grid: WaveGrid
    components: int
    coeffs: np.ndarray
    mean_free: bool = False
    divergence_free: bool = False

    def __post_init__(self):
        expected = (self.components,) + self.grid.box_shape
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs shape {self.coeffs.shape}, expected {expected}")
        if not np.iscomplexobj(self.coeffs):
            raise ValueError("coeffs must be a complex array")

    @classmethod
    def zeros(cls, grid: WaveGrid, components: int, dtype=np.complex128, **flags):
        shape = (components,) + grid.box_shape
        return cls(grid, components, np.zeros(shape, dtype=dtype), **flags)

    def copy(self) -> "SpectralField":
        return SpectralField(self.grid, self.components, self.coeffs.copy(),
                             self.mean_free, self.divergence_free)

    def conjugate_asymmetry(self) -> float:
        """Max absolute deviation from the reality constraint coeffs(-k) = conj coeffs(k)."""
        reflected = reflect_modes(self.coeffs, self.grid.d)
        return float(np.max(np.abs(self.coeffs - np.conj(reflected))))

    def divergence_max(self) -> float:
        """Max over modes of |sum_i k_i coeffs_i(k)| (components must equal d)."""
        if self.components != self.grid.d:
            raise ValueError("divergence needs a d-component field")
        div = np.sum(self.grid.kappa_mesh * self.coeffs, axis=0) / self.grid.M
        return float(np.max(np.abs(div)))

    def validate(self, tol: float = 1e-12) -> dict:
        """Check the declared invariants; returns the measured residuals."""
        scale = float(np.max(np.abs(self.coeffs))) or 1.0
        report = {"conjugate_asymmetry": self.conjugate_asymmetry() / scale}
        if self.mean_free:
            zero = self.coeffs[(slice(None),) + (0,) * self.grid.d]
            report["zero_mode"] = float(np.max(np.abs(zero))) / scale
        if self.divergence_free and self.components == self.grid.d:
            report["divergence"] = self.divergence_max() / scale
        report["ok"] = all(v <= tol for k, v in report.items() if k != "ok")
        return report


def reflect_modes(coeffs: np.ndarray, d: int) -> np.ndarray:
    """Reindex the trailing d box axes by kappa -> -kappa."""
    out = coeffs
    for ax in range(-d, 0):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


# ---------------------------------------------------------------------------
# Transforms


def _forward_array(values: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """Forward transform of (..., n, ..., n) samples to the (..., m, ..., m) box."""
    d, n = grid.d, grid.physical_points_per_axis
    if values.shape[-d:] != (n,) * d:
        raise ValueError(f"physical shape {values.shape[-d:]}, expected {(n,) * d}")
    spec = scipy.fft.fftn(values, axes=tuple(range(-d, 0)))
    for ax in range(-d, 0):
        spec = np.take(spec, grid._crop_index, axis=ax)
    spec *= (grid.M / n) ** d
    return spec


def _inverse_array(coeffs: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """Inverse of `_forward_array`; returns complex samples on the n^d grid."""
    d, n, m = grid.d, grid.physical_points_per_axis, grid.modes_per_axis
    if coeffs.shape[-d:] != (m,) * d:
        raise ValueError(f"box shape {coeffs.shape[-d:]}, expected {(m,) * d}")
    padded = np.zeros(coeffs.shape[:-d] + (n,) * d, dtype=np.complex128)
    sel = np.ix_(*([grid._crop_index] * d))
    padded[(Ellipsis,) + sel] = coeffs
    out = scipy.fft.ifftn(padded, axes=tuple(range(-d, 0)))
    out *= (n / grid.M) ** d
    return out


def _forward_real(values: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """Forward transform for real-valued samples via rfftn (about 2x faster).

    Reconstructs the negative frequencies of the last axis from conjugate
    symmetry, which is exact for real input.
    """
    d, n, h = grid.d, grid.physical_points_per_axis, grid.h
    spec = scipy.fft.rfftn(values, axes=tuple(range(-d, 0)))
    for ax in range(-d, -1):
        spec = np.take(spec, grid._crop_index, axis=ax)
    pos = spec[..., : h + 1] * (grid.M / n) ** d
    # c(kappa', -j) = conj c(-kappa', j): reflect every box axis except the
    # last (which is a plain 1..h slice, reversed below back into -h..-1 order)
    neg = np.conj(pos[..., 1:])
    for ax in range(-d, -1):
        neg = np.roll(np.flip(neg, axis=ax), 1, axis=ax)
    return np.concatenate([pos, neg[..., ::-1]], axis=-1)


def _inverse_real(coeffs: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """Inverse transform assuming conjugate-symmetric coefficients; real output."""
    d, n, m, h = grid.d, grid.physical_points_per_axis, grid.modes_per_axis, grid.h
    if coeffs.shape[-d:] != (m,) * d:
        raise ValueError(f"box shape {coeffs.shape[-d:]}, expected {(m,) * d}")
    half = coeffs.shape[:-d] + (n,) * (d - 1) + (n // 2 + 1,)
    dtype = np.complex64 if coeffs.dtype == np.complex64 else np.complex128
    padded = np.zeros(half, dtype=dtype)
    sel = np.ix_(*([grid._crop_index] * (d - 1)), np.arange(h + 1))
    padded[(Ellipsis,) + sel] = coeffs[..., : h + 1]
    out = scipy.fft.irfftn(padded, s=(n,) * d, axes=tuple(range(-d, 0)))
    return out * (n / grid.M) ** d


def transform_forward(values: np.ndarray, grid: WaveGrid) -> SpectralField:
    """Transform physical samples (components, n, ..., n) to a SpectralField."""
    if values.ndim != grid.d + 1:
        raise ValueError("expected a (components,) + physical-grid array")
    if np.isrealobj(values):
        coeffs = _forward_real(values.astype(np.float64, copy=False), grid)
    else:
        coeffs = _forward_array(values, grid)
    return SpectralField(grid, values.shape[0], np.ascontiguousarray(coeffs))


def transform_inverse(u: SpectralField) -> np.ndarray:
    """Transform a SpectralField back to real physical samples.

    Raises ValueError if the coefficients are not conjugate-symmetric (the
    inverse of a non-real field has no canonical real representation).
    """
    out = _inverse_array(u.coeffs, u.grid)
    scale = float(np.max(np.abs(out))) or 1.0
    if float(np.max(np.abs(out.imag))) > 1e-8 * scale:
        raise ValueError("coefficients are not conjugate-symmetric; no real inverse")
    return np.ascontiguousarray(out.real)


def field_inner(u: SpectralField, v: SpectralField) -> float:
    """L2 inner product <u, v> = M^{-d} sum_k uhat(k) . conj(vhat(k)).

    Valid for real-valued (conjugate-symmetric) fields, for which
    vhat(-k) = conj vhat(k) makes this the Parseval sum.
    """
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    s = np.sum(u.coeffs * np.conj(v.coeffs)) / u.grid.M**u.grid.d
    return float(s.real)


# ---------------------------------------------------------------------------
# Multiplier operators


def leray_multiplier(k, d: int) -> np.ndarray:
    """Leray projection matrix P(k) = I - k k^T/|k|^2 for one wavevector.

    k = 0 returns the identity by convention.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (d,):
        raise ValueError(f"wavevector shape {k.shape}, expected ({d},)")
    norm2 = float(np.dot(k, k))
    if norm2 == 0.0:
        return np.eye(d)
    return np.eye(d) - np.outer(k, k) / norm2


def apply_leray(u: SpectralField) -> SpectralField:
    """Project a d-component field onto divergence-free fields, mode by mode."""
    if u.components != u.grid.d:
        raise ValueError("Leray projection needs a d-component field")
    coeffs = _apply_leray_array(u.coeffs, u.grid)
    return SpectralField(u.grid, u.components, coeffs,
                         mean_free=u.mean_free, divergence_free=True)


def _apply_leray_array(coeffs: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """Leray projection on a raw (..., d) + box coefficient array.

    The component axis sits just before the d box axes; any leading axes are
    treated as batch.  The projection uses integer kappa (the M factors
    cancel), so the output divergence vanishes to rounding; kappa = 0 is
    left untouched per the P(0) = identity convention.
    """
    d = grid.d
    comp_ax = coeffs.ndim - d - 1
    moved = np.moveaxis(coeffs, comp_ax, 0)  # (d,) + batch + box
    nbatch = moved.ndim - 1 - d
    kap = grid.kappa_mesh.reshape((d,) + (1,) * nbatch + grid.box_shape)
    dot = np.sum(kap * moved, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(grid.abs2_kappa > 0, dot / grid.abs2_kappa, 0.0)
    out = moved - kap * frac
    return np.moveaxis(out, 0, comp_ax)


def frac_laplacian_apply(u: SpectralField, theta: float, sign: str = "forward") -> SpectralField:
    """Apply a fractional Laplacian power as a Fourier multiplier.

    sign="forward" multiplies mode k by (2*pi*|k|)^{2*theta} (the operator
    (-Laplace)^theta); sign="half-forcing" uses (2*pi*|k|)^{theta} (the square
    root that scales the noise).  The zero mode maps to 0.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    if sign == "forward":
        mult = (2 * np.pi * u.grid.k_abs) ** (2 * theta)
    elif sign == "half-forcing":
        mult = (2 * np.pi * u.grid.k_abs) ** theta
    else:
        raise ValueError(f"sign must be 'forward' or 'half-forcing', got {sign!r}")
    return SpectralField(u.grid, u.components, u.coeffs * mult,
                         mean_free=True, divergence_free=u.divergence_free)


def divfree_basis(k, d: int) -> np.ndarray:
    """Orthonormal basis of the divergence-free directions at one wavevector.

    Returns an array of shape (d-1, d) with real rows v_a satisfying
    v_a . k = 0, v_a . v_b = delta_ab and sum_a outer(v_a, v_a) = P(k).

    Raises ValueError for k = 0, where no such basis exists.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (d,):
        raise ValueError(f"wavevector shape {k.shape}, expected ({d},)")
    norm = float(np.linalg.norm(k))
    if norm == 0.0:
        raise ValueError("divfree_basis is undefined at k = 0")
    khat = k / norm
    if d == 2:
        return np.array([[-khat[1], khat[0]]])
    ref = int(np.argmin(np.abs(k)))
    w = np.eye(3)[ref] - khat[ref] * khat
    v1 = w / np.linalg.norm(w)
    v2 = np.cross(khat, v1)
    return np.stack([v1, v2])


def apply_cutoff(u: SpectralField, rho: "CutoffProfile") -> SpectralField:
    """Multiply mode k by the mollifier value rhohat^N(k) = chi(|k|/N)."""
    mult = rho.evaluate(u.grid.k_abs)
    return SpectralField(u.grid, u.components, u.coeffs * mult,
                         mean_free=u.mean_free, divergence_free=u.divergence_free)


@dataclass(frozen=True)
class CutoffProfile:
    """Radial Fourier mollifier rhohat^N(k) = chi(k/N) with chi supported in the unit ball.

    kind "sharp" is the indicator of the closed ball (1 for |k| <= N, 0 for
    |k| > N); kind "smooth" is the C-infinity bump chi(r) = exp(-r^2/(1-r^2))
    for r < 1, vanishing for |k| >= N.  Both have chi(0) = 1 and values in [0, 1].
    """

    kind: str
    N: float

    def __post_init__(self):
        if self.kind not in ("sharp", "smooth"):
            raise ValueError(f"kind must be 'sharp' or 'smooth', got {self.kind!r}")
        if self.N <= 0:
            raise ValueError("cutoff radius N must be positive")

    def evaluate(self, k_abs) -> np.ndarray:
        """Profile values at the given |k| (array or scalar)."""
        r = np.asarray(k_abs, dtype=np.float64) / self.N
        if self.kind == "sharp":
            return (r <= 1.0).astype(np.float64)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inner = np.where(r < 1.0, np.exp(-(r**2) / np.maximum(1.0 - r**2, 1e-300)), 0.0)
        return inner


def cutoff_extent(grid: WaveGrid, rho: CutoffProfile) -> int:
    """Largest integer mode index |kappa_i| that survives the cutoff on this grid."""
    # floor with a tiny pad so e.g. M*N = 4.0 stored as 3.9999999999999996 still counts 4
    h_cut = int(math.floor(grid.M * rho.N + 1e-9))
    return min(grid.h, h_cut)


def dealias_points_required(grid: WaveGrid, rho: CutoffProfile) -> int:
    """Minimum physical points per axis for an alias-free quadratic nonlinearity.

    With both input and output truncated to |kappa| <= h_cut, products alias
    back into the retained band unless n >= 3*h_cut + 1; at that size the
    pseudo-spectral product equals the exact truncated convolution.
    """
    return 3 * cutoff_extent(grid, rho) + 1


def satisfies_dealias_rule(grid: WaveGrid, rho: CutoffProfile) -> bool:
    return grid.physical_points_per_axis >= dealias_points_required(grid, rho)
