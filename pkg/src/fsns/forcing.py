"""Sampling of divergence-free white noise, forcing increments, and stress noise.

The target law for the torus white noise mu^M: independently over conjugate
mode pairs {k, -k}, k != 0, the coefficient vector uhat(k) is a proper complex
Gaussian with covariance E[uhat_i(k) conj(uhat_j(k))] = M^d P_ij(k) (P the
Leray multiplier), uhat(-k) = conj(uhat(k)), and uhat(0) = 0.

Sampling strategy: draw one independent complex amplitude per divergence-free
basis direction at every box mode (real and imaginary parts N(0, M^d/2)),
assemble the vector field, then symmetrize u <- (u + conj(u(-k)))/sqrt(2).
Because the only self-conjugate mode on an odd box is k = 0 (where the basis
vanishes), the symmetrized field has exactly the target law; divergence
freeness holds per mode by construction rather than by projection.  The
projection route is kept as `sample_divfree_white_noise_projected` for
cross-checks.

All samplers are pure functions of (params, counter): the Philox key is
derived from (seed, stream_id, counter, purpose tag) and the draw order is
fixed, so identical inputs reproduce bit-identical fields on any machine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_generator
from .spectral import (
    SpectralField,
    WaveGrid,
    _apply_leray_array,
    _forward_real,
    leray_multiplier,
    reflect_modes,
    transform_forward,
)


@dataclass(frozen=True)
class NoiseParams:
    """Physical constants and RNG identity for noise sampling.

    kBT is the thermal energy (the product k_B * T enters only as a whole);
    nu and rho_density are the viscosity and mass density of the stress-noise
    covariance.  seed/stream_id feed the counter-based key derivation.
    """

    theta: float = 1.0
    nu: float = 1.0
    kBT: float = 1.0
    rho_density: float = 1.0
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.nu <= 0 or self.kBT <= 0 or self.rho_density <= 0:
            raise ValueError("nu, kBT and rho_density must be positive")


def _assemble_divfree(grid: WaveGrid, amplitudes: np.ndarray) -> np.ndarray:
    """Contract (..., d-1) + box complex amplitudes with the basis directions."""
    basis = grid.divfree_basis_mesh  # (d-1, d) + box
    amp = np.expand_dims(amplitudes, axis=-grid.d - 1)  # (..., d-1, 1) + box
    return np.sum(amp * basis, axis=-grid.d - 2)


def _symmetrized_divfree_gaussian(grid: WaveGrid, gen: np.random.Generator,
                                  batch: tuple = (), scale=None) -> np.ndarray:
    """Core sampler: conjugate-symmetric divergence-free Gaussian coefficients.

    Returns an array of shape batch + (d,) + box whose per-mode covariance is
    scale(k)^2 * M^d * P(k) (scale defaults to 1).  Draw order: a single
    normal block of shape (2,) + batch + (d-1,) + box, C order, real part
    first.
    """
    d = grid.d
    sigma = np.sqrt(grid.M**d / 2.0)
    z = gen.normal(0.0, sigma, size=(2,) + batch + (d - 1,) + grid.box_shape)
    amp = z[0] + 1j * z[1]
    u = _assemble_divfree(grid, amp)
    u = (u + np.conj(reflect_modes(u, d))) / np.sqrt(2.0)
    if scale is not None:
        u = u * scale
    return u


def sample_divfree_white_noise(grid: WaveGrid, params: NoiseParams,
                               counter: int = 0) -> SpectralField:
    """Draw one sample of the divergence-free mean-free white noise mu^M.

    Distinct counters give independent samples; identical (params, counter)
    give bit-identical ones.
    """
    gen = make_generator(params.seed, params.stream_id, counter, "white")
    coeffs = _symmetrized_divfree_gaussian(grid, gen)
    return SpectralField(grid, grid.d, coeffs, mean_free=True, divergence_free=True)


def sample_white_noise_batch(grid: WaveGrid, params: NoiseParams, counter: int,
                             batch: int) -> np.ndarray:
    """Draw `batch` independent white-noise fields under one key, shape (batch, d) + box.

    Ensemble helper: one Philox key covers the whole block, so member i of the
    block is addressed by (counter, i), not by its own counter.
    """
    gen = make_generator(params.seed, params.stream_id, counter, "white-batch", batch)
    return _symmetrized_divfree_gaussian(grid, gen, batch=(batch,))


def sample_divfree_white_noise_projected(grid: WaveGrid, params: NoiseParams,
                                         counter: int = 0) -> SpectralField:
    """Cross-check sampler: project a full d-component Gaussian field with Leray.

    Same law as `sample_divfree_white_noise` (the projection of an isotropic
    complex Gaussian with covariance M^d I is Gaussian with covariance
    M^d P(k)), different draw path and key.
    """
    d = grid.d
    gen = make_generator(params.seed, params.stream_id, counter, "white-proj")
    sigma = np.sqrt(grid.M**d / 2.0)
    z = gen.normal(0.0, sigma, size=(2, d) + grid.box_shape)
    u = z[0] + 1j * z[1]
    u = (u + np.conj(reflect_modes(u, d))) / np.sqrt(2.0)
    u[(slice(None),) + (0,) * d] = 0.0
    u = _apply_leray_array(u, grid)
    return SpectralField(grid, d, u, mean_free=True, divergence_free=True)


def forcing_scale(grid: WaveGrid, theta: float, dt: float) -> np.ndarray:
    """Per-mode standard-deviation multiplier sqrt(2 dt) (2 pi |k|)^theta."""
    return np.sqrt(2.0 * dt) * (2 * np.pi * grid.k_abs) ** theta


def sample_forcing_increment(grid: WaveGrid, theta: float, dt: float,
                             params: NoiseParams, counter: int = 0) -> SpectralField:
    """Gaussian forcing increment of sqrt(2) A^{theta/2} P dW over a step dt.

    Per-mode covariance 2 dt (2 pi |k|)^{2 theta} M^d P(k); the zero mode is
    exactly 0.  Distinct counters are independent.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    gen = make_generator(params.seed, params.stream_id, counter, "force")
    coeffs = _symmetrized_divfree_gaussian(grid, gen, scale=forcing_scale(grid, theta, dt))
    return SpectralField(grid, grid.d, coeffs, mean_free=True, divergence_free=True)


# ---------------------------------------------------------------------------
# Landau-Lifshitz stress noise


def sample_ll_stress(grid: WaveGrid, params: NoiseParams,
                     counter: int = 0) -> SpectralField:
    """Sample the fluctuating stress tensor tau, spatially white, d = 3 only.

    Cell covariance follows (2 nu kBT / rho) (delta_ik delta_jl
    + delta_il delta_jk - (2/3) delta_ij delta_kl) times a spatial delta,
    realized on the collocation grid by scaling with 1/sqrt(cell volume).
    Construction: symmetrize an iid Gaussian matrix and remove the trace
    part, G -> (G + G^T)/sqrt(2) - tr(.)/3.

    Returns a SpectralField with components = 9, index pairs (i, j) flattened
    row-major.  Rejects d != 3 (the -2/3 deviatoric weight is 3-specific).
    """
    d = grid.d
    if d != 3:
        raise ValueError("the stress covariance is specific to d = 3")
    n = grid.physical_points_per_axis
    gen = make_generator(params.seed, params.stream_id, counter, "stress")
    g = gen.normal(0.0, 1.0, size=(d, d) + (n,) * d)
    s = (g + np.swapaxes(g, 0, 1)) / np.sqrt(2.0)
    trace = np.einsum("ii...->...", s)
    s -= np.eye(d).reshape(d, d, 1, 1, 1) * (trace / 3.0)
    cell_volume = (grid.M / n) ** d
    amplitude = np.sqrt(2.0 * params.nu * params.kBT / params.rho_density / cell_volume)
    tau = transform_forward((amplitude * s).reshape((d * d,) + (n,) * d), grid)
    return SpectralField(grid, d * d, tau.coeffs)


def leray_div_stress(tau: SpectralField) -> SpectralField:
    """Leray-projected divergence of a stress field: P(div tau)_i = P(2 pi i k_j tau_ij)."""
    grid = tau.grid
    d = grid.d
    if tau.components != d * d:
        raise ValueError(f"expected {d * d} components (a d x d tensor), got {tau.components}")
    t = tau.coeffs.reshape((d, d) + grid.box_shape)
    k = grid.kappa_mesh / grid.M
    div = 2j * np.pi * np.sum(k[np.newaxis] * t, axis=1)
    out = _apply_leray_array(div, grid)
    return SpectralField(grid, d, out, mean_free=True, divergence_free=True)


def sample_ll_stress_batch(grid: WaveGrid, params: NoiseParams, counter: int,
                           batch: int) -> np.ndarray:
    """Batch version of sample_ll_stress; returns raw (batch, 9) + box coefficients."""
    d = grid.d
    if d != 3:
        raise ValueError("the stress covariance is specific to d = 3")
    n = grid.physical_points_per_axis
    gen = make_generator(params.seed, params.stream_id, counter, "stress-batch", batch)
    g = gen.normal(0.0, 1.0, size=(batch, d, d) + (n,) * d)
    s = (g + np.swapaxes(g, 1, 2)) / np.sqrt(2.0)
    trace = np.einsum("bii...->b...", s)
    s -= np.eye(d).reshape(1, d, d, 1, 1, 1) * (trace[:, np.newaxis, np.newaxis] / 3.0)
    cell_volume = (grid.M / n) ** d
    amplitude = np.sqrt(2.0 * params.nu * params.kBT / params.rho_density / cell_volume)
    return _forward_real((amplitude * s).reshape((batch, d * d) + (n,) * d), grid)


# ---------------------------------------------------------------------------
# Empirical covariance with jackknife errors


def probe_index(grid: WaveGrid, kappa) -> tuple:
    """Box index tuple of the integer mode kappa (FFT layout)."""
    m = grid.modes_per_axis
    idx = []
    for kj in kappa:
        kj = int(kj)
        if abs(kj) > grid.h:
            raise ValueError(f"mode {tuple(kappa)} outside the box (h = {grid.h})")
        idx.append(kj % m)
    return tuple(idx)


def extract_probes(fields, probes) -> np.ndarray:
    """Stack probe coefficients from fields into a complex (S, P) matrix.

    probes is a list of (component, kappa) pairs; kappa a length-d integer
    tuple.
    """
    fields = list(fields)
    grid = fields[0].grid
    cols = []
    for comp, kappa in probes:
        idx = (comp,) + probe_index(grid, kappa)
        cols.append(np.array([f.coeffs[idx] for f in fields]))
    return np.stack(cols, axis=1)


@dataclass
class CovarianceEstimate:
    """Unbiased sample covariance with per-entry jackknife standard errors."""

    cov: np.ndarray       # (P, P) complex, E[(z_p - mean)(conj z_q - mean)]
    se_real: np.ndarray   # (P, P) jackknife standard error of Re cov
    se_imag: np.ndarray   # (P, P) jackknife standard error of Im cov
    n_samples: int


def empirical_covariance(samples, probes=None, chunk: int = 512) -> CovarianceEstimate:
    """Unbiased covariance of probe coefficients with jackknife standard errors.

    Args:
      samples: either a complex array of shape (S, P) or a sequence of
        SpectralField (then `probes` selects the entries).
      probes: list of (component, kappa) pairs, required for field input.
      chunk: leave-one-out evaluation block size (memory control).

    Returns:
      CovarianceEstimate; requires S >= 2 (S >= 3 for finite jackknife SE).
    """
    if probes is not None and not isinstance(samples, np.ndarray):
        z = extract_probes(samples, probes)
    else:
        z = np.asarray(samples)
        if z.ndim == 1:
            z = z[:, np.newaxis]
    s_count, p_count = z.shape
    if s_count < 2:
        raise ValueError("need at least 2 samples for an unbiased covariance")
    zc = np.conj(z)
    sum_z = z.sum(axis=0)
    gram = z.T @ zc  # (P, P): sum_s z_sp conj z_sq
    cov = (gram - np.outer(sum_z, np.conj(sum_z)) / s_count) / (s_count - 1)
    if s_count < 3:
        inf = np.full((p_count, p_count), np.inf)
        return CovarianceEstimate(cov, inf, inf.copy(), s_count)

    # Leave-one-out estimates in closed form, accumulated chunk-wise.
    acc = np.zeros((p_count, p_count), dtype=np.complex128)
    acc2_re = np.zeros((p_count, p_count))
    acc2_im = np.zeros((p_count, p_count))
    for lo in range(0, s_count, chunk):
        zi = z[lo:lo + chunk]
        cross = np.einsum("sp,sq->spq", zi, np.conj(zi))
        rest = sum_z[np.newaxis, :] - zi
        loo = (gram[np.newaxis] - cross
               - np.einsum("sp,sq->spq", rest, np.conj(rest)) / (s_count - 1)) / (s_count - 2)
        acc += loo.sum(axis=0)
        acc2_re += (loo.real**2).sum(axis=0)
        acc2_im += (loo.imag**2).sum(axis=0)
    mean = acc / s_count
    var_re = np.maximum(acc2_re / s_count - mean.real**2, 0.0)
    var_im = np.maximum(acc2_im / s_count - mean.imag**2, 0.0)
    factor = float(s_count - 1)
    return CovarianceEstimate(cov, np.sqrt(factor * var_re), np.sqrt(factor * var_im),
                              s_count)


def white_noise_covariance(grid: WaveGrid, probes) -> np.ndarray:
    """Analytic mu^M covariance matrix at the given probes (for comparisons)."""
    p_count = len(probes)
    out = np.zeros((p_count, p_count), dtype=np.complex128)
    for a, (ca, ka) in enumerate(probes):
        for b, (cb, kb) in enumerate(probes):
            ka_arr, kb_arr = np.asarray(ka), np.asarray(kb)
            if not np.any(ka_arr):
                continue  # the zero mode is pinned to 0
            if np.array_equal(ka_arr, kb_arr):
                proj = leray_multiplier(ka_arr.astype(float), grid.d)
                out[a, b] = grid.M**grid.d * proj[ca, cb]
            # probes at -k correlate only through the pseudo-covariance, which is 0
    return out
