"""Galerkin-truncated nonlinear dynamics and the exponential-Euler integrator.

The evolved equation per Fourier mode k (a_k = (2 pi |k|)^{2 theta}):

    du = -a_k u dt - coupling * BN(u) dt + sqrt(2) a_k^{1/2} P dW,

where BN is the cutoff Leray-projected advection term and `coupling` depends
on the configured mode: the scaled bare coupling lambda * N^{2 theta - (d+2)/2},
a fixed effective coupling, or (d = 2) an effective coupling divided by
sqrt(log N).  One exponential-Euler step is

    u' = e^{-a dt} u - coupling * dt * phi1(a dt) * BN(u) + eta,
    eta ~ N(0, (1 - e^{-2 a dt}) M^d P(k)),

so coupling = 0 reproduces the Ornstein-Uhlenbeck marginals exactly and the
mode-box white noise measure is exactly invariant.

Ensembles evolve as a batched (members, d) + box state.  All noise is keyed by
(seed, stream_id, member, step), which makes trajectories reproducible
bit-for-bit, independent of batching, and resumable from any step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache

import numpy as np
from scipy.integrate import trapezoid

from .checkpoint import config_fingerprint, save_checkpoint
from .forcing import NoiseParams, _symmetrized_divfree_gaussian, probe_index
from .rng import make_generator
from .spectral import (
    CutoffProfile,
    SpectralField,
    WaveGrid,
    _apply_leray_array,
    _forward_real,
    _inverse_real,
    satisfies_dealias_rule,
)

log = logging.getLogger(__name__)


class AliasingError(ValueError):
    """The physical grid is too coarse for an alias-free quadratic term."""


class SimulationError(RuntimeError):
    """A trajectory aborted (NaN/overflow or CFL violation)."""


def lambda_scaled(lam: float, N: float, theta: float, d: int) -> float:
    """Scaled coupling lam * N^{2 theta - (d+2)/2}; constant in N at theta = (d+2)/4."""
    if N < 1:
        raise ValueError("cutoff radius N must be >= 1")
    return lam * float(N) ** (2 * theta - (d + 2) / 2)


@dataclass(frozen=True)
class DynamicsConfig:
    """Parameters of one truncated-dynamics run.

    mode selects how the nonlinearity coupling is resolved:
      "bare-lambda":      coupling = lambda_scaled(lam, N, theta, d)
      "fixed-lambda-hat": coupling = lambda_hat as given
      "2d-weak-coupling": coupling = lambda_hat / sqrt(log N)  (d = 2, N > 1)

    dt = None uses the default 0.1 / (2 pi N)^{2 theta}, which resolves the
    fastest cutoff-retained OU mode; cutoff = None means the sharp profile of
    radius N.  mollify_noise additionally multiplies the noise by the cutoff
    profile (off by default: only the Leray projection acts on the noise).
    """

    theta: float = 1.0
    N: float = 4.0
    T: float = 1.0
    lam: float = 0.0
    lambda_hat: float = 0.0
    dt: float | None = None
    cutoff: CutoffProfile | None = None
    integrator: str = "exponential-euler"
    mode: str = "bare-lambda"
    mollify_noise: bool = False

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < self.resolved_dt():
            raise ValueError("horizon T must cover at least one step")
        if self.integrator != "exponential-euler":
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.mode not in ("bare-lambda", "fixed-lambda-hat", "2d-weak-coupling"):
            raise ValueError(f"unknown coupling mode {self.mode!r}")

    def resolved_dt(self) -> float:
        if self.dt is not None:
            return self.dt
        return 0.1 / (2 * np.pi * self.N) ** (2 * self.theta)

    def resolved_cutoff(self) -> CutoffProfile:
        return self.cutoff or CutoffProfile(kind="sharp", N=self.N)

    def coupling(self, d: int) -> float:
        if self.mode == "bare-lambda":
            return lambda_scaled(self.lam, self.N, self.theta, d)
        if self.mode == "fixed-lambda-hat":
            return self.lambda_hat
        if d != 2:
            raise ValueError("2d-weak-coupling requires d = 2")
        if self.N <= 1:
            raise ValueError("2d-weak-coupling requires N > 1")
        return self.lambda_hat / math.sqrt(math.log(self.N))

    def as_dict(self) -> dict:
        rho = self.resolved_cutoff()
        return {
            "theta": self.theta, "N": self.N, "T": self.T, "lam": self.lam,
            "lambda_hat": self.lambda_hat, "dt": self.resolved_dt(),
            "cutoff": [rho.kind, rho.N], "integrator": self.integrator,
            "mode": self.mode, "mollify_noise": self.mollify_noise,
        }


# ---------------------------------------------------------------------------
# Nonlinearity


def _nonlinearity_raw(coeffs: np.ndarray, grid: WaveGrid, mask: np.ndarray,
                      return_max_speed: bool = False):
    """Pseudo-spectral BN on raw (..., d) + box coefficients (batch-capable).

    cutoff -> physical -> tensor product -> divergence -> Leray -> cutoff.
    The caller is responsible for the dealiasing precondition; under it the
    result equals the exact truncated convolution.  Optionally also returns
    max_x |v(x)| of the cutoff field (for CFL checks).
    """
    d = grid.d
    cdt = np.complex64 if coeffs.dtype == np.complex64 else np.complex128
    rdt = np.float32 if cdt == np.complex64 else np.float64
    mask_r = mask.astype(rdt)
    vm = np.moveaxis(_inverse_real(coeffs * mask_r, grid), -d - 1, 0)
    max_speed = None
    if return_max_speed:
        speed2 = vm[0] ** 2
        for i in range(1, d):
            speed2 = speed2 + vm[i] ** 2
        max_speed = float(np.sqrt(speed2.max()))
        del speed2
    kfac = (grid.kappa_mesh / grid.M).astype(rdt)
    div = [None] * d
    for i in range(d):
        for j in range(i, d):
            w_hat = _forward_real(vm[i] * vm[j], grid)
            term = kfac[j] * w_hat
            div[i] = term if div[i] is None else div[i] + term
            if j != i:
                term = kfac[i] * w_hat
                div[j] = term if div[j] is None else div[j] + term
    out = np.moveaxis(np.stack(div), 0, -d - 1) * np.asarray(2j * np.pi, dtype=cdt)
    out = (_apply_leray_array(out, grid) * mask_r).astype(cdt, copy=False)
    if return_max_speed:
        return out, max_speed
    return out


def nonlinearity_BN(u: SpectralField, cutoff: CutoffProfile) -> SpectralField:
    """Cutoff Leray advection term: rho * P div((rho * u) tensor (rho * u)).

    Raises AliasingError unless the grid satisfies the dealiasing rule for
    this cutoff, which is what makes the result an exact convolution and the
    pairing <u, BN(u)> vanish to rounding.
    """
    grid = u.grid
    if u.components != grid.d:
        raise ValueError("BN needs a d-component velocity field")
    if not satisfies_dealias_rule(grid, cutoff):
        raise AliasingError(
            f"need physical_points_per_axis >= {3 * min(grid.h, int(grid.M * cutoff.N + 1e-9)) + 1}, "
            f"got {grid.physical_points_per_axis}")
    out = _nonlinearity_raw(u.coeffs, grid, cutoff.evaluate(grid.k_abs))
    return SpectralField(grid, grid.d, out, mean_free=True, divergence_free=True)


def pairing(a: np.ndarray, b: np.ndarray, grid: WaveGrid) -> np.ndarray:
    """L2 pairing of conjugate-symmetric coefficient arrays over components+modes.

    Sums the trailing d+1 axes; leading axes broadcast.
    """
    axes = tuple(range(-grid.d - 1, 0))
    return np.real(np.sum(a * np.conj(b), axis=axes)) / grid.M**grid.d


# ---------------------------------------------------------------------------
# Exponential-Euler stepping


@lru_cache(maxsize=32)
def _step_factors(grid: WaveGrid, theta: float, dt: float):
    """Per-mode decay e^{-a dt}, dt*phi1(a dt), and noise std factor."""
    a = (2 * np.pi * grid.k_abs) ** (2 * theta)
    decay = np.exp(-a * dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi1dt = np.where(a > 0, -np.expm1(-a * dt) / a, dt)
    noise_scale = np.sqrt(-np.expm1(-2 * a * dt))
    for arr in (a, decay, phi1dt, noise_scale):
        arr.setflags(write=False)
    return decay, phi1dt, noise_scale


def _step_noise(grid: WaveGrid, params: NoiseParams, member: int, step: int,
                scale: np.ndarray) -> np.ndarray:
    gen = make_generator(params.seed, params.stream_id, member, step, "step-noise")
    return _symmetrized_divfree_gaussian(grid, gen, scale=scale)


def step_exponential_euler(u: SpectralField, config: DynamicsConfig,
                           params: NoiseParams, counter: int,
                           noise: np.ndarray | None = None) -> SpectralField:
    """One integrator step of a single field; `counter` is the step index.

    The noise is keyed by (params, member 0, counter), matching member 0 of
    `simulate`, so iterating this function reproduces that trajectory.  Pass
    `noise` explicitly (same shape as coeffs) to drive a frozen path; an
    all-zero array gives the deterministic flow.
    """
    grid = u.grid
    rho = config.resolved_cutoff()
    if not satisfies_dealias_rule(grid, rho):
        raise AliasingError("grid violates the dealiasing rule for this cutoff")
    dt = config.resolved_dt()
    decay, phi1dt, noise_scale = _step_factors(grid, config.theta, dt)
    coupling = config.coupling(grid.d)
    with np.errstate(invalid="ignore", over="ignore"):
        new = u.coeffs * decay
        if coupling != 0.0:
            b = _nonlinearity_raw(u.coeffs, grid, rho.evaluate(grid.k_abs))
            new = new - (coupling * phi1dt) * b
        if noise is None:
            scale = noise_scale * rho.evaluate(grid.k_abs) if config.mollify_noise else noise_scale
            noise = _step_noise(grid, params, 0, counter, scale)
        new = new + noise
    if not np.all(np.isfinite(new)):
        raise SimulationError(f"non-finite state after step {counter}")
    return SpectralField(grid, grid.d, new, mean_free=u.mean_free, divergence_free=True)


# ---------------------------------------------------------------------------
# Trajectory simulation


@dataclass
class Trajectory:
    """In-memory result of one (possibly batched) simulation segment."""

    config: DynamicsConfig
    grid: WaveGrid
    dt: float
    coupling: float
    start_step: int
    n_steps: int
    record_steps: np.ndarray               # absolute step index of each record
    times: np.ndarray                      # record times (step * dt)
    probes: tuple                          # (component, kappa) pairs recorded
    probe_series: np.ndarray | None        # (records, members, probes) complex
    duhamel_series: np.ndarray | None      # (n_steps+1, fields, members) pairings
    energy_pairing_max: float              # max relative <u, BN(u)> seen
    initial_states: np.ndarray             # (members, d) + box at start_step
    final_states: np.ndarray               # (members, d) + box at the end
    snapshots: list = dataclass_field(default_factory=list)  # (step, states)

    @property
    def n_members(self) -> int:
        return self.final_states.shape[0]


def _initial_states(grid: WaveGrid, params: NoiseParams, n_members: int,
                    initial, dtype) -> np.ndarray:
    shape = (n_members, grid.d) + grid.box_shape
    if initial is None:
        out = np.empty(shape, dtype=np.complex128)
        for member in range(n_members):
            gen = make_generator(params.seed, params.stream_id, member, "init")
            out[member] = _symmetrized_divfree_gaussian(grid, gen)
        return out.astype(dtype, copy=False)
    if isinstance(initial, str) and initial == "zero":
        return np.zeros(shape, dtype=dtype)
    arr = initial.coeffs if isinstance(initial, SpectralField) else np.asarray(initial)
    if arr.shape == shape[1:]:
        arr = np.broadcast_to(arr, shape)
    if arr.shape != shape:
        raise ValueError(f"initial state shape {arr.shape}, expected {shape}")
    return arr.astype(dtype).copy()


def _probe_gather(states: np.ndarray, probe_idx: list) -> np.ndarray:
    return np.stack([states[(slice(None),) + idx] for idx in probe_idx], axis=-1)


def simulate(config: DynamicsConfig, grid: WaveGrid, params: NoiseParams, *,
             n_members: int = 1, initial=None, record_stride: int = 1,
             probes=(), test_fields: np.ndarray | None = None,
             snapshot_stride: int = 0, start_step: int = 0,
             start_states: np.ndarray | None = None, dtype=np.complex128,
             checkpoint_path: str | None = None, checkpoint_every: int = 0,
             check_every: int = 25, cfl_every: int = 50) -> Trajectory:
    """Integrate an ensemble over a segment of round(T / dt) steps.

    Every member evolves under noise keyed by its member index and the
    absolute step counter, so results do not depend on how members are
    batched and a run can resume from (start_step, start_states) bitwise.

    Args:
      config, grid, params: dynamics parameters, mode box, RNG identity.
      n_members: ensemble size (ignored when start_states is given).
      initial: None for a fresh stationary-measure sample per member, "zero",
        or a field/array to start from.
      record_stride: steps between probe records (records also the endpoint
        when the stride divides the step count).
      probes: (component, kappa) mode coefficients to record.
      test_fields: optional (fields, d) + box array; the pairing of BN(u)
        against each is recorded at every step for time quadrature.
      snapshot_stride: if > 0, keep full state copies every so many steps.
      start_step/start_states: resume point; T still measures this segment.
      checkpoint_path/checkpoint_every: periodic atomic state dumps; a dump
        is also written on abort.

    Raises SimulationError on NaN/overflow or CFL violation (after writing a
    checkpoint when a path is configured).
    """
    d = grid.d
    rho = config.resolved_cutoff()
    if not satisfies_dealias_rule(grid, rho):
        raise AliasingError(
            f"grid {grid.physical_points_per_axis} points/axis violates the "
            f"dealiasing rule for cutoff N = {rho.N}")
    dt = config.resolved_dt()
    n_steps = int(round(config.T / dt))
    if n_steps < 1:
        raise ValueError("T shorter than one step")
    coupling = config.coupling(d)
    mask = rho.evaluate(grid.k_abs)
    decay64, phi1dt64, noise_scale = _step_factors(grid, config.theta, dt)
    rdt = np.float32 if dtype == np.complex64 else np.float64
    decay = decay64.astype(rdt)
    bfac = (coupling * phi1dt64).astype(rdt)
    nscale = noise_scale * mask if config.mollify_noise else noise_scale

    if start_states is not None:
        states = np.array(start_states, dtype=dtype)
        n_members = states.shape[0]
    else:
        states = _initial_states(grid, params, n_members, initial, dtype)
    initial_states = states.copy()

    probe_idx = [(int(comp),) + probe_index(grid, kappa) for comp, kappa in probes]
    record_steps, times, probe_records = [], [], []
    duhamel = None
    phi_conj = None
    pair_sub = "ei" + "xyz"[:d] + ",fi" + "xyz"[:d] + "->fe"
    if test_fields is not None:
        phi_conj = np.conj(np.asarray(test_fields, dtype=np.complex128))
        duhamel = np.empty((n_steps + 1, phi_conj.shape[0], n_members))
    snapshots = []
    energy_max = 0.0
    md = grid.M**d
    need_b = coupling != 0.0 or test_fields is not None

    def _record(step, states):
        record_steps.append(step)
        times.append(step * dt)
        if probe_idx:
            probe_records.append(_probe_gather(states, probe_idx).astype(np.complex128))

    def _dump(step, states, kind):
        if checkpoint_path is None:
            return
        header = {
            "config_hash": config_fingerprint({
                "config": config.as_dict(), "d": d, "M": grid.M,
                "modes_per_axis": grid.modes_per_axis,
                "physical_points_per_axis": grid.physical_points_per_axis,
                "seed": params.seed, "stream_id": params.stream_id,
            }),
            "kind": kind, "member": -1, "step": step, "time": step * dt,
            "seed": params.seed, "stream_id": params.stream_id,
            "d": d, "M": grid.M, "modes_per_axis": grid.modes_per_axis,
            "physical_points_per_axis": grid.physical_points_per_axis,
        }
        save_checkpoint(checkpoint_path, states, header)

    for rel in range(n_steps):
        step = start_step + rel
        if rel % record_stride == 0:
            _record(step, states)
        if snapshot_stride and rel % snapshot_stride == 0:
            snapshots.append((step, states.copy()))
        if checkpoint_every and rel and rel % checkpoint_every == 0:
            _dump(step, states, "periodic")

        if need_b:
            want_speed = coupling != 0.0 and rel % cfl_every == 0
            res = _nonlinearity_raw(states, grid, mask, return_max_speed=want_speed)
            b, max_speed = res if want_speed else (res, None)
            if max_speed is not None and dt * abs(coupling) * max_speed > 0.5:
                _dump(step, states, "abort")
                raise SimulationError(
                    f"CFL violation at step {step}: dt*coupling*max|v| = "
                    f"{dt * abs(coupling) * max_speed:.3g} > 0.5")
            pair_ub = pairing(b, states, grid)
            norm_u = np.sqrt(pairing(states, states, grid))
            norm_b = np.sqrt(pairing(b, b, grid))
            rel_pair = np.max(np.abs(pair_ub) / (norm_u * norm_b + 1e-300))
            energy_max = max(energy_max, float(rel_pair))
            if duhamel is not None:
                duhamel[rel] = np.einsum(pair_sub, b, phi_conj).real / md
        if rel % check_every == 0 and not math.isfinite(float(np.max(np.abs(states)))):
            _dump(step, states, "abort")
            raise SimulationError(f"non-finite state at step {step} (t = {step * dt:.4g})")

        noise = np.empty_like(states)
        for member in range(n_members):
            noise[member] = _step_noise(grid, params, member, step, nscale)
        if need_b and coupling != 0.0:
            states = states * decay - bfac * b + noise
        else:
            states = states * decay + noise

    end = start_step + n_steps
    if n_steps % record_stride == 0:
        _record(end, states)
    if duhamel is not None:
        b = _nonlinearity_raw(states, grid, mask)
        duhamel[n_steps] = np.einsum(pair_sub, b, phi_conj).real / md
    if not math.isfinite(float(np.max(np.abs(states)))):
        _dump(end, states, "abort")
        raise SimulationError(f"non-finite state at final step {end}")
    if checkpoint_path is not None and checkpoint_every:
        _dump(end, states, "final")

    return Trajectory(
        config=config, grid=grid, dt=dt, coupling=coupling,
        start_step=start_step, n_steps=n_steps,
        record_steps=np.array(record_steps), times=np.array(times),
        probes=tuple(probes),
        probe_series=np.stack(probe_records) if probe_records else None,
        duhamel_series=duhamel, energy_pairing_max=energy_max,
        initial_states=initial_states, final_states=states,
        snapshots=snapshots)


# ---------------------------------------------------------------------------
# Large-scale rescaling and Duhamel functionals


def time_scale(N: float, theta: float) -> float:
    """Factor N^{2 theta} between source and rescaled time axes."""
    return float(N) ** (2 * theta)


def rescale_field(u: SpectralField, N, target_modes_per_axis: int | None = None,
                  target_points_per_axis: int | None = None) -> SpectralField:
    """Map a field on a torus of side M*N to its N-compressed image on side M.

    Realizes x -> N x in Fourier space: the coefficient at integer mode kappa
    carries over with amplitude factor N^{-d/2} (so the physical wavevector
    kappa/(M N) becomes kappa/M, N times larger), which preserves the mode-box
    white-noise law.  N must be a positive integer; N = 1 is the identity.
    """
    if float(N) != int(N) or N < 1:
        raise ValueError(f"rescaling ratio must be a positive integer, got {N}")
    N = int(N)
    src = u.grid
    m_t = target_modes_per_axis or src.modes_per_axis
    if m_t > src.modes_per_axis or m_t % 2 == 0:
        raise ValueError("target box must be odd and no larger than the source box")
    n_t = target_points_per_axis or src.physical_points_per_axis
    grid = WaveGrid(d=src.d, M=src.M / N, modes_per_axis=m_t,
                    physical_points_per_axis=n_t)
    coeffs = u.coeffs
    if m_t < src.modes_per_axis:
        h_t = (m_t - 1) // 2
        keep = np.concatenate([np.arange(0, h_t + 1),
                               np.arange(src.modes_per_axis - h_t, src.modes_per_axis)])
        sel = np.ix_(*([keep] * src.d))
        coeffs = coeffs[(slice(None),) + sel]
    coeffs = coeffs * float(N) ** (-src.d / 2)
    return SpectralField(grid, u.components, coeffs,
                         mean_free=u.mean_free, divergence_free=u.divergence_free)


@dataclass
class DuhamelIntegral:
    """Trapezoid time integral of a recorded pairing series, per member."""

    values: np.ndarray        # (members,) integral over [0, T]
    refined: np.ndarray       # Richardson extrapolation from dt and 2*dt
    refinement_gap: float     # max |fine - coarse| quadrature difference
    dt: float
    coupling_applied: float


def duhamel_nonlinear_functional(traj: Trajectory, field_index: int = 0,
                                 t: float | None = None,
                                 include_coupling: bool = True) -> DuhamelIntegral:
    """Integrate the recorded BN(u_s) pairing over time by trapezoid rule.

    include_coupling multiplies by the resolved coupling of the run (how the
    term enters the equation); with it, a coupling-0 run integrates to 0
    exactly.  The Richardson diagnostic compares against the every-other-step
    trapezoid sum to expose quadrature error.
    """
    if traj.duhamel_series is None:
        raise ValueError("trajectory was run without test_fields")
    series = traj.duhamel_series[:, field_index, :]
    if t is not None:
        last = int(round(t / traj.dt))
        if not 0 < last < series.shape[0]:
            raise ValueError(f"t = {t} outside the recorded horizon")
        series = series[: last + 1]
    factor = traj.coupling if include_coupling else 1.0
    fine = factor * trapezoid(series, dx=traj.dt, axis=0)
    n_half = (series.shape[0] - 1) // 2 * 2
    coarse = factor * trapezoid(series[: n_half + 1 : 2], dx=2 * traj.dt, axis=0)
    refined = fine + (fine - coarse) / 3.0
    return DuhamelIntegral(values=fine, refined=refined,
                           refinement_gap=float(np.max(np.abs(fine - coarse))),
                           dt=traj.dt, coupling_applied=factor)


def duhamel_segment_integrals(traj: Trajectory, field_index: int = 0,
                              segments: int = 1,
                              include_coupling: bool = True) -> DuhamelIntegral:
    """Trapezoid integrals of the pairing over equal disjoint time windows.

    One long trajectory yields `segments` weakly correlated samples of the
    integral instead of one, which is what makes second-moment estimates
    affordable: the squared integral of a single window has the relative
    spread of a chi-square with one degree of freedom no matter how long the
    window is.  Window lengths are the largest even step count that fits
    (trailing steps are dropped), so the Richardson diagnostic stays defined.
    Returns a DuhamelIntegral whose values have shape (segments, members).
    """
    if traj.duhamel_series is None:
        raise ValueError("trajectory was run without test_fields")
    if segments < 1:
        raise ValueError("segments must be >= 1")
    series = traj.duhamel_series[:, field_index, :]
    n_steps = series.shape[0] - 1
    per = n_steps // segments // 2 * 2
    if per < 2:
        raise ValueError(
            f"{segments} segments need >= {2 * segments} steps, have {n_steps}")
    factor = traj.coupling if include_coupling else 1.0
    values = np.empty((segments, series.shape[1]))
    refined = np.empty_like(values)
    gap = 0.0
    for j in range(segments):
        window = series[j * per: (j + 1) * per + 1]
        fine = factor * trapezoid(window, dx=traj.dt, axis=0)
        coarse = factor * trapezoid(window[::2], dx=2 * traj.dt, axis=0)
        values[j] = fine
        refined[j] = fine + (fine - coarse) / 3.0
        gap = max(gap, float(np.max(np.abs(fine - coarse))))
    return DuhamelIntegral(values=values, refined=refined, refinement_gap=gap,
                           dt=traj.dt, coupling_applied=factor)
