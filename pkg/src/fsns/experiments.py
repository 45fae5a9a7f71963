"""Experiment implementations behind the CLI: one runner per config kind.

Each runner reads its kind-specific INI section strictly, drives ensembles
through `harness.run_ensemble` (so chunking, streams, checkpoints and
determinism are uniform), and emits RunRecords: one per parameter point plus
one scan-level summary where a fit or trend spans points.

Statistical conventions shared by the runners:
  * ensembles supply the error bars; member spread drives normal-theory CIs
    via `mean_var_ci` and drift z-scores;
  * multiple-comparison gates use Bonferroni over the probed set, with the
    per-set level recorded next to the raw statistic;
  * every random draw is keyed by (master seed, fixed context words), so a
    rerun of the same config reproduces every emitted number exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import replace
from itertools import product

import numpy as np
from scipy import stats

from .chaos import (
    ChaosVector,
    apply_G_minus,
    apply_G_plus,
    apply_L_theta,
    fock_inner,
    project_divfree_slots,
    slot_count,
    symmetrize_kernel,
    theta_integral,
    vartheta_N,
    vartheta_limit,
)
from .diffusivity import StationarityError, estimate_diffusivity, nu_eff, nu_eff_label
from .dynamics import (
    DynamicsConfig,
    SimulationError,
    duhamel_nonlinear_functional,
    duhamel_segment_integrals,
    nonlinearity_BN,
    pairing,
)
from .forcing import (
    empirical_covariance,
    probe_index,
    sample_divfree_white_noise,
    sample_ll_stress_batch,
    sample_white_noise_batch,
)
from .harness import (
    ConfigError,
    Emitter,
    ExperimentConfig,
    derive_grid,
    fft_friendly,
    kind_section,
    mean_var_ci,
    run_ensemble,
    stat,
)
from .rng import make_generator
from .spectral import (
    CutoffProfile,
    SpectralField,
    WaveGrid,
    _apply_leray_array,
    divfree_basis,
    field_inner,
    leray_multiplier,
)

Z95 = 1.959963984540054  # two-sided 95% normal quantile


# ---------------------------------------------------------------------------
# Shared helpers


def with_cutoff(dyn: DynamicsConfig, **changes) -> DynamicsConfig:
    """`dataclasses.replace` that keeps the cutoff profile in step with N."""
    n_new = changes.get("N", dyn.N)
    changes.setdefault(
        "cutoff", CutoffProfile(kind=dyn.resolved_cutoff().kind, N=n_new))
    return replace(dyn, **changes)


def shell_modes(d: int, max_abs2: int) -> list[tuple]:
    """Conjugate-pair representatives with 0 < |kappa|^2 <= max_abs2.

    One of each {kappa, -kappa} pair (the coefficients are conjugate, so
    probing both adds no information), ordered by (|kappa|^2, lexicographic).
    """
    h = int(math.isqrt(max_abs2))
    out = []
    for kappa in product(range(-h, h + 1), repeat=d):
        norm2 = sum(x * x for x in kappa)
        if not 0 < norm2 <= max_abs2:
            continue
        first = next(x for x in kappa if x != 0)
        if first > 0:
            out.append((norm2, kappa))
    return [kappa for _, kappa in sorted(out)]


def component_probes(grid: WaveGrid, modes) -> list[tuple]:
    """(component, kappa) probes, skipping components the projection kills."""
    probes = []
    for kappa in modes:
        proj = leray_multiplier(np.asarray(kappa, dtype=float) / grid.M, grid.d)
        for l in range(grid.d):
            if proj[l, l] > 1e-9:
                probes.append((l, kappa))
    return probes


def standard_test_field(grid: WaveGrid, scale_h1: bool = True) -> np.ndarray:
    """Fixed low-mode divergence-free real test function, H^1-normalized.

    The same function (same integer modes and amplitudes) on every grid, so
    scans over the cutoff N compare like against like.
    """
    d = grid.d
    kappas = [(1, 0), (0, 1), (1, 1)] if d == 2 else [
        (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0)]
    coeffs = np.zeros((d,) + grid.box_shape, dtype=np.complex128)
    for j, kappa in enumerate(kappas):
        direction = divfree_basis(np.asarray(kappa, dtype=float), d)[0]
        amp = (1.0 + 0.5j * (-1) ** j) / math.sqrt(len(kappas))
        idx_p = probe_index(grid, kappa)
        idx_m = probe_index(grid, tuple(-x for x in kappa))
        for l in range(d):
            coeffs[(l,) + idx_p] += amp * direction[l]
            coeffs[(l,) + idx_m] += np.conj(amp) * direction[l]
    if scale_h1:
        weight = 1.0 + (2 * np.pi * grid.k_abs) ** 2
        h1_sq = float(np.sum(weight * np.abs(coeffs) ** 2)) / grid.M**grid.d
        coeffs /= math.sqrt(h1_sq)
    return coeffs


def bn_convolution_oracle(u: SpectralField, rho: CutoffProfile) -> np.ndarray:
    """BN by direct mode-by-mode convolution; O(m^{2d}), small boxes only.

    Independent of the FFT path: mollify the legs, convolve coefficient
    arrays with the 1/M^d product normalization, take the divergence, apply
    the Leray multiplier, mollify the output.
    """
    grid = u.grid
    d, h, M = grid.d, grid.h, grid.M
    mask = rho.evaluate(grid.k_abs)
    v = u.coeffs * mask
    kax = grid.kappa_axis.astype(int)
    box_of = {int(k): i for i, k in enumerate(kax)}
    out = np.zeros_like(u.coeffs)
    for out_idx in np.ndindex(grid.box_shape):
        kappa = tuple(int(kax[i]) for i in out_idx)
        if mask[out_idx] == 0.0:
            continue
        w = np.zeros((d, d), dtype=np.complex128)
        for p_idx in np.ndindex(grid.box_shape):
            q = tuple(kappa[a] - int(kax[i]) for a, i in enumerate(p_idx))
            if any(abs(qa) > h for qa in q):
                continue
            q_idx = tuple(box_of[qa] for qa in q)
            w += np.outer(v[(slice(None),) + p_idx], v[(slice(None),) + q_idx])
        w /= M**d
        div = 2j * np.pi * (np.asarray(kappa, dtype=float) / M) @ w.T
        proj = leray_multiplier(np.asarray(kappa, dtype=float) / M, d)
        out[(slice(None),) + out_idx] = mask[out_idx] * (proj @ div)
    return out


def weighted_loglog_fit(ns, means, ses):
    """Slope and its standard error for log(mean) vs log(N), weighted by
    the relative errors of the means."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(means, dtype=float))
    w = (np.asarray(means, dtype=float) / np.asarray(ses, dtype=float)) ** 2
    xbar = np.sum(w * x) / np.sum(w)
    ybar = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xbar) ** 2)
    slope = float(np.sum(w * (x - xbar) * (y - ybar)) / sxx)
    return slope, float(1.0 / math.sqrt(sxx))


def _estimate_se(est) -> float:
    return (est.ci_high - est.ci_low) / (2 * Z95)


# ---------------------------------------------------------------------------
# invariance


def run_invariance(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    sec = kind_section(cfg)
    max_abs2 = sec.get_int("probe_max_abs2", 3)
    ks_alpha = sec.get_float("ks_alpha", 0.01)
    drift_sigmas = sec.get_float("drift_sigmas", 3.0)
    with_control = sec.get_bool("control", True)
    sec.finish()

    grid = derive_grid(cfg)
    modes = shell_modes(cfg.d, max_abs2)
    probes = component_probes(grid, modes)
    alpha_per = ks_alpha / len(probes)

    runs = [("main", cfg.dynamics, 0)]
    if with_control:
        zero = with_cutoff(cfg.dynamics, lam=0.0, lambda_hat=0.0)
        runs.append(("control", zero, 1))

    for label, dyn, block in runs:
        traj = run_ensemble(cfg, dyn, grid, probes=probes, run_block=block,
                            label=label, workers=workers)
        series = traj.probe_series            # (records, members, probes)
        members = traj.n_members
        half = series.shape[0] // 2
        ks_ps, drift_zs = [], []
        for p, (l, kappa) in enumerate(probes):
            proj = leray_multiplier(np.asarray(kappa, dtype=float) / grid.M, cfg.d)
            target_var = grid.M**cfg.d * proj[l, l]
            z_final = traj.final_states[(slice(None), l) + probe_index(grid, kappa)]
            samples = np.concatenate([z_final.real, z_final.imag])
            ks_p = float(stats.kstest(
                samples, stats.norm(scale=math.sqrt(target_var / 2)).cdf).pvalue)
            energy = np.abs(series[:, :, p]) ** 2
            drift = energy[half:].mean(axis=0) - energy[:half].mean(axis=0)
            se = drift.std(ddof=1) / math.sqrt(members)
            drift_z = float(drift.mean() / se) if se > 0 else 0.0
            var_ratio = float(energy.mean() / target_var)
            ks_ps.append(ks_p)
            drift_zs.append(drift_z)
            em.emit(f"{label}/probe", {
                "run": label, "component": l, "kappa": list(kappa),
                "coupling": traj.coupling,
            }, {
                "ks_p": stat(ks_p),
                "drift_z": stat(drift_z),
                "var_ratio": stat(var_ratio),
            })
        passed = min(ks_ps) > alpha_per and max(abs(z) for z in drift_zs) < drift_sigmas
        em.emit(label, {
            "run": label, "coupling": traj.coupling, "members": members,
            "n_probes": len(probes), "ks_alpha": ks_alpha,
            "bonferroni_alpha": alpha_per, "drift_sigmas": drift_sigmas,
            "T": dyn.T, "dt": traj.dt,
        }, {
            "min_ks_p": stat(min(ks_ps)),
            "max_abs_drift_z": stat(max(abs(z) for z in drift_zs)),
            "energy_pairing_max": stat(traj.energy_pairing_max),
            "stationary": stat(1.0 if passed else 0.0),
        })


# ---------------------------------------------------------------------------
# energy-identity


def run_energy_identity(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    sec = kind_section(cfg)
    n_fields = sec.get_int("fields", 100)
    oracle_fields = sec.get_int("oracle_fields", 3)
    oracle_n_cut = sec.get_float("oracle_N", 2.0)
    step_T = sec.get_float("step_T", 0.02)
    step_members = sec.get_int("step_members", 4)
    sec.finish()

    grid = derive_grid(cfg)
    rho = cfg.dynamics.resolved_cutoff()
    params = cfg.noise_params(0)
    worst = 0.0
    for i in range(n_fields):
        u = sample_divfree_white_noise(grid, params, counter=i)
        b = nonlinearity_BN(u, rho)
        num = abs(float(pairing(u.coeffs, b.coeffs, grid)))
        den = math.sqrt(field_inner(u, u)) * math.sqrt(field_inner(b, b))
        worst = max(worst, num / den)
    em.emit("static-pairing", {
        "fields": n_fields, "N": rho.N, "modes_per_axis": grid.modes_per_axis,
    }, {"max_rel_pairing": stat(worst), "threshold": stat(1e-10)})

    h = int(oracle_n_cut)
    oracle_grid = WaveGrid(d=cfg.d, M=cfg.M, modes_per_axis=2 * h + 1,
                           physical_points_per_axis=fft_friendly(3 * h + 1))
    oracle_rho = CutoffProfile(kind=rho.kind, N=oracle_n_cut)
    oracle_params = cfg.noise_params(1)
    worst_oracle = 0.0
    for i in range(oracle_fields):
        u = sample_divfree_white_noise(oracle_grid, oracle_params, counter=i)
        fast = nonlinearity_BN(u, oracle_rho).coeffs
        slow = bn_convolution_oracle(u, oracle_rho)
        scale = float(np.max(np.abs(slow)))
        worst_oracle = max(worst_oracle, float(np.max(np.abs(fast - slow))) / scale)
    em.emit("convolution-oracle", {
        "fields": oracle_fields, "N": oracle_n_cut,
        "points_per_axis": oracle_grid.physical_points_per_axis,
    }, {"max_rel_difference": stat(worst_oracle), "threshold": stat(1e-10)})

    dyn = with_cutoff(cfg.dynamics, T=step_T)
    traj = run_ensemble(cfg, dyn, grid, members=step_members, run_block=2,
                        label="steps", workers=workers,
                        test_fields=standard_test_field(grid)[np.newaxis])
    em.emit("integrator-steps", {
        "members": step_members, "T": step_T, "dt": traj.dt,
        "coupling": traj.coupling, "steps": traj.n_steps,
    }, {"max_rel_pairing": stat(traj.energy_pairing_max), "threshold": stat(1e-10)})


# ---------------------------------------------------------------------------
# triviality-scan


def run_triviality_scan(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    """Scale of the time-integrated nonlinearity against the cutoff.

    The observable per cutoff N is E|int_0^S coupling * <phi, BN(u)> dt|^2
    with S the segment horizon: each trajectory of length T is cut into
    `segments` disjoint windows and the squared window integrals are averaged
    per member first, so the standard error comes from independent members
    only.  A `dt` key pins one step size across the scan (quadrature bias then
    grows with N; keep dt * N small), otherwise each N uses its own resolved
    default times `dt_scale`.  The default keeps step * fastest-pair-rate at
    0.2, where the trapezoid bias on the fastest pairs is ~0.3%; five times
    coarser still keeps the whole-sum bias under a few percent.
    """
    sec = kind_section(cfg)
    n_list = sec.get_floats("N_list", [4, 8, 16])
    lam = sec.get_float("lam", cfg.dynamics.lam or 1.0)
    horizon = sec.get_float("T", cfg.dynamics.T)
    members = sec.get_int("members", cfg.ensemble_size)
    segments = sec.get_int("segments", 1)
    dt_fixed = sec.get_float("dt")
    dt_scale = sec.get_float("dt_scale", 1.0)
    band_limit = sec.get_float("band_limit", 3.0)
    sec.finish()
    if dt_scale <= 0:
        raise ConfigError("[triviality-scan] dt_scale must be positive")

    theta = cfg.dynamics.theta
    expected = 2.0 * (theta - 1.0)
    ns, means, ses = [], [], []
    for i, n_cut in enumerate(n_list):
        dyn = with_cutoff(cfg.dynamics, N=float(n_cut), T=horizon, lam=lam,
                          lambda_hat=0.0, mode="bare-lambda", dt=dt_fixed)
        if dt_fixed is None and dt_scale != 1.0:
            dyn = with_cutoff(dyn, dt=dt_scale * dyn.resolved_dt())
        grid = derive_grid(cfg, n_cut)
        phi = standard_test_field(grid)
        traj = run_ensemble(cfg, dyn, grid, members=members, run_block=i,
                            label=f"N{n_cut:g}", workers=workers,
                            record_stride=max(traj_steps(dyn), 1),
                            test_fields=phi[np.newaxis])
        integral = duhamel_segment_integrals(traj, 0, segments)
        per_member = np.mean(integral.values ** 2, axis=0)
        mean, var, (lo, hi) = mean_var_ci(per_member)
        se = math.sqrt(var / members)
        segment_T = (traj.n_steps // segments // 2 * 2) * traj.dt
        ns.append(float(n_cut))
        means.append(mean)
        ses.append(se)
        em.emit(f"N{n_cut:g}", {
            "N": float(n_cut), "theta": theta, "lam": lam,
            "coupling": traj.coupling, "T": horizon, "dt": traj.dt,
            "members": members, "segments": segments,
            "segment_T": segment_T,
        }, {
            "mean_sq_integral": stat(mean, var, lo, hi),
            "quadrature_gap": stat(integral.refinement_gap),
        })

    slope, slope_se = weighted_loglog_fit(ns, means, ses)
    band = max(means) / min(means)
    em.emit("scan", {
        "theta": theta, "lam": lam, "N_list": ns, "members": members,
        "segments": segments, "expected_slope": expected,
        "band_limit": band_limit,
    }, {
        "slope": stat(slope, slope_se**2, slope - Z95 * slope_se,
                      slope + Z95 * slope_se),
        "band_ratio": stat(band),
    })


def traj_steps(dyn: DynamicsConfig) -> int:
    return int(round(dyn.T / dyn.resolved_dt()))


# ---------------------------------------------------------------------------
# diffusivity-scan


def run_diffusivity_scan(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    """Fitted large-scale diffusivity against the coupling strength.

    All coupling points reuse the same noise streams (run_block 0), so the
    estimation errors are positively correlated across the scan and the
    monotonicity comparison sees mostly the systematic coupling effect, not
    two independent draws of the noise.
    """
    sec = kind_section(cfg)
    lambda_hats = sec.get_floats("lambda_hats", [0.0, 0.5, 1.0, 2.0])
    max_abs_k = sec.get_float("max_abs_k", cfg.dynamics.N / 4.0)
    fit_hi = sec.get_float("fit_window_hi")
    sec.finish()

    grid = derive_grid(cfg)
    modes = shell_modes(cfg.d, int(max_abs_k * cfg.M) ** 2)
    probes = [(l, kappa) for kappa in modes for l in range(cfg.d)]
    fit_window = None
    if fit_hi is not None:
        fit_window = (cfg.record_stride * cfg.dynamics.resolved_dt(), fit_hi)

    nu_hats, zs = [], []
    any_failed = False
    for i, lam_hat in enumerate(lambda_hats):
        if cfg.dynamics.mode == "bare-lambda":
            dyn = with_cutoff(cfg.dynamics, lam=lam_hat)
        else:
            dyn = with_cutoff(cfg.dynamics, lambda_hat=lam_hat,
                              mode="fixed-lambda-hat")
        label = f"lh{lam_hat:g}"
        traj = run_ensemble(cfg, dyn, grid, probes=probes, run_block=0,
                            label=label, workers=workers)
        params = {
            "lambda_hat": lam_hat, "N": cfg.dynamics.N, "theta": cfg.dynamics.theta,
            "coupling": traj.coupling, "T": cfg.dynamics.T, "dt": traj.dt,
            "members": traj.n_members, "prediction": nu_eff_label(cfg.d),
        }
        try:
            est = estimate_diffusivity(
                traj, fit_window=fit_window, max_abs_k=max_abs_k,
                seed=cfg.master_seed * 31 + i)
        except StationarityError as exc:
            any_failed = True
            em.emit(label, {**params, "error": str(exc)},
                    {"nu_hat": stat(None)}, status="numerical-abort")
            continue
        se = _estimate_se(est)
        z_one = (est.nu_hat - 1.0) / se if se > 0 else 0.0
        nu_hats.append(est.nu_hat)
        zs.append(z_one)
        em.emit(label, params, {
            "nu_hat": stat(est.nu_hat, se**2, est.ci_low, est.ci_high),
            "nu_eff_predicted": stat(nu_eff(cfg.d, lam_hat)),
            "z_vs_one": stat(z_one),
            "fit_residual": stat(est.residual),
        })

    if len(nu_hats) == len(lambda_hats):
        order = np.argsort(lambda_hats)
        sorted_nu = np.asarray(nu_hats)[order]
        monotone = bool(np.all(np.diff(sorted_nu) >= 0))
        em.emit("scan", {
            "lambda_hats": list(lambda_hats), "N": cfg.dynamics.N,
            "theta": cfg.dynamics.theta,
        }, {
            "monotone": stat(1.0 if monotone else 0.0),
            "z_at_max_coupling": stat(zs[int(np.argmax(lambda_hats))]),
        })
    if any_failed:
        raise StationarityError("one or more coupling points failed the "
                                "stationarity gate; see emitted records")


# ---------------------------------------------------------------------------
# weak-coupling-2d


def run_weak_coupling_2d(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    if cfg.d != 2:
        raise ConfigError("weak-coupling-2d requires [grid] d = 2")
    sec = kind_section(cfg)
    lam_hat = sec.get_float("lambda_hat", cfg.dynamics.lambda_hat)
    n_list = sec.get_floats("N_list", [16, 64])
    t_list = _broadcast(sec.get_floats("T_list", [cfg.dynamics.T]), len(n_list),
                        "T_list")
    dt_list = _broadcast(sec.get_floats("dt_list",
                                        [cfg.dynamics.dt or 2e-4]), len(n_list),
                         "dt_list")
    member_list = _broadcast(sec.get_ints("members_list", [cfg.ensemble_size]),
                             len(n_list), "members_list")
    max_abs_k = sec.get_float("max_abs_k", 2.0)
    sec.finish()

    predicted = nu_eff(2, lam_hat)
    errors, nu_hats = [], []
    for i, n_cut in enumerate(n_list):
        dyn = with_cutoff(cfg.dynamics, N=float(n_cut), T=t_list[i],
                          dt=dt_list[i], lambda_hat=lam_hat,
                          mode="2d-weak-coupling")
        grid = derive_grid(cfg, n_cut)
        modes = shell_modes(2, int(max_abs_k * cfg.M) ** 2)
        probes = [(l, kappa) for kappa in modes for l in range(2)]
        traj = run_ensemble(cfg, dyn, grid, members=member_list[i], run_block=i,
                            label=f"N{n_cut:g}", probes=probes, workers=workers)
        est = estimate_diffusivity(traj, max_abs_k=max_abs_k,
                                   seed=cfg.master_seed * 37 + i)
        err = abs(est.nu_hat - predicted)
        errors.append(err)
        nu_hats.append(est.nu_hat)
        se = _estimate_se(est)
        em.emit(f"N{n_cut:g}", {
            "N": float(n_cut), "lambda_hat": lam_hat, "coupling": traj.coupling,
            "T": t_list[i], "dt": dt_list[i], "members": member_list[i],
        }, {
            "nu_hat": stat(est.nu_hat, se**2, est.ci_low, est.ci_high),
            "nu_eff_predicted": stat(predicted),
            "abs_error": stat(err),
            "z_vs_one": stat((est.nu_hat - 1.0) / se if se > 0 else 0.0),
        })

    non_increasing = bool(np.all(np.diff(errors) <= 1e-12))
    em.emit("scan", {
        "lambda_hat": lam_hat, "N_list": [float(n) for n in n_list],
    }, {
        "error_non_increasing": stat(1.0 if non_increasing else 0.0),
        "final_abs_error": stat(errors[-1]),
        "final_nu_hat": stat(nu_hats[-1]),
    })


def _broadcast(values, n, name):
    if len(values) == 1:
        return list(values) * n
    if len(values) != n:
        raise ConfigError(f"{name} must have 1 or {n} entries, got {len(values)}")
    return list(values)


# ---------------------------------------------------------------------------
# noise-equivalence


def run_noise_equivalence(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    if cfg.d != 3:
        raise ConfigError("noise-equivalence requires [grid] d = 3 "
                          "(the stress covariance is 3-specific)")
    sec = kind_section(cfg)
    n_samples = sec.get_int("samples", 10000)
    batch = sec.get_int("batch", 500)
    max_abs2 = sec.get_int("probe_max_abs2", 3)
    alpha = sec.get_float("alpha", 0.0027)
    sec.finish()

    grid = derive_grid(cfg)
    modes = shell_modes(3, max_abs2)
    # Components annihilated by the projection are zero a.s. on both sides;
    # comparing them would divide 0 by 0, so leave them out of the chi-square.
    probes = component_probes(grid, modes)
    idx = [(l,) + probe_index(grid, kappa) for l, kappa in probes]
    mult = (math.sqrt(2 * cfg.nu * cfg.kBT / cfg.rho_density)
            * 2 * np.pi * grid.k_abs)
    kfac = grid.kappa_mesh / grid.M

    params_ll = cfg.noise_params(0)
    params_wn = cfg.noise_params(1)
    z_ll = np.empty((n_samples, len(probes)), dtype=np.complex128)
    z_wn = np.empty_like(z_ll)
    done = 0
    counter = 0
    while done < n_samples:
        size = min(batch, n_samples - done)
        tau = sample_ll_stress_batch(grid, params_ll, counter, size)
        tau = tau.reshape((size, 3, 3) + grid.box_shape)
        div = 2j * np.pi * np.einsum("jxyz,bijxyz->bixyz", kfac, tau)
        div = _apply_leray_array(div, grid)
        white = sample_white_noise_batch(grid, params_wn, counter, size) * mult
        for p, index in enumerate(idx):
            z_ll[done:done + size, p] = div[(slice(None),) + index]
            z_wn[done:done + size, p] = white[(slice(None),) + index]
        done += size
        counter += 1

    cov_ll = empirical_covariance(z_ll)
    cov_wn = empirical_covariance(z_wn)
    diff = cov_ll.cov - cov_wn.cov
    se_re = np.sqrt(cov_ll.se_real**2 + cov_wn.se_real**2)
    se_im = np.sqrt(cov_ll.se_imag**2 + cov_wn.se_imag**2)

    groups: dict = {}
    for p, (_, kappa) in enumerate(probes):
        groups.setdefault(kappa, []).append(p)
    alpha_per = alpha / len(groups)
    min_p = 1.0
    max_z = 0.0
    all_pass = True
    for kappa in modes:
        cols = groups[kappa]
        q = 0.0
        dof = 0
        for a_pos, a in enumerate(cols):
            for b in cols[a_pos:]:
                z = diff[a, b].real / se_re[a, b]
                q += z * z
                dof += 1
                max_z = max(max_z, abs(z))
                if a != b:
                    z = diff[a, b].imag / se_im[a, b]
                    q += z * z
                    dof += 1
                    max_z = max(max_z, abs(z))
        p_val = float(stats.chi2.sf(q, dof))
        ok = p_val > alpha_per
        all_pass = all_pass and ok
        min_p = min(min_p, p_val)
        trace_ll = float(sum(cov_ll.cov[a, a].real for a in cols))
        trace_wn = float(sum(cov_wn.cov[a, a].real for a in cols))
        em.emit("mode", {
            "kappa": list(kappa), "samples": n_samples, "dof": dof,
            "alpha": alpha, "bonferroni_alpha": alpha_per,
        }, {
            "chi2": stat(q),
            "p_value": stat(p_val),
            "trace_ratio": stat(trace_ll / trace_wn),
            "consistent": stat(1.0 if ok else 0.0),
        })

    off_z = 0.0
    for a in range(len(probes)):
        for b in range(a + 1, len(probes)):
            if probes[a][1] != probes[b][1]:
                off_z = max(off_z,
                            abs(diff[a, b].real) / se_re[a, b],
                            abs(diff[a, b].imag) / se_im[a, b])
    em.emit("summary", {
        "samples": n_samples, "n_modes": len(groups), "alpha": alpha,
        "nu": cfg.nu, "kBT": cfg.kBT, "rho_density": cfg.rho_density,
    }, {
        "min_p_value": stat(min_p),
        "max_block_z": stat(max_z),
        "max_cross_mode_z": stat(off_z),
        "all_consistent": stat(1.0 if all_pass else 0.0),
    })


# ---------------------------------------------------------------------------
# operator-checks


def _random_chaos_vector(grid: WaveGrid, gen, levels) -> ChaosVector:
    kernels = {}
    s_count = slot_count(grid)
    for n in levels:
        raw = (gen.standard_normal((s_count,) * n)
               + 1j * gen.standard_normal((s_count,) * n))
        kernels[n] = project_divfree_slots(symmetrize_kernel(raw), grid)
    return ChaosVector.from_kernels(grid, kernels, symmetrize=False, project=False)


def run_operator_checks(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    sec = kind_section(cfg)
    n_fields = sec.get_int("fields", 100)
    n_pairs = sec.get_int("chaos_pairs", 8)
    threshold = sec.get_float("threshold", 1e-10)
    sec.finish()
    del workers  # every check here is single-process

    def emit_check(name, value, **params):
        em.emit(name, {"check": name, "threshold": threshold, **params},
                {"max_rel": stat(value), "threshold": stat(threshold),
                 "pass": stat(1.0 if value <= threshold else 0.0)})

    # Leray multiplier: projection, idempotence, rank d-1, kernel direction
    gen = make_generator(cfg.master_seed, "operator", "leray")
    worst_idem = worst_rank = worst_kernel = 0.0
    for d in (2, 3):
        for _ in range(50):
            k = gen.normal(size=d)
            proj = leray_multiplier(k, d)
            worst_idem = max(worst_idem, float(np.max(np.abs(proj @ proj - proj))))
            worst_rank = max(worst_rank, abs(float(np.trace(proj)) - (d - 1)))
            worst_kernel = max(worst_kernel,
                               float(np.max(np.abs(proj @ k))) / np.linalg.norm(k))
    emit_check("leray-idempotent", worst_idem)
    emit_check("leray-rank", worst_rank)
    emit_check("leray-kernel", worst_kernel)

    # energy pairing on random white-noise fields
    grid = derive_grid(cfg)
    rho = cfg.dynamics.resolved_cutoff()
    params = cfg.noise_params(0)
    worst = 0.0
    for i in range(n_fields):
        u = sample_divfree_white_noise(grid, params, counter=i)
        b = nonlinearity_BN(u, rho)
        num = abs(float(pairing(u.coeffs, b.coeffs, grid)))
        den = math.sqrt(field_inner(u, u)) * math.sqrt(field_inner(b, b))
        worst = max(worst, num / den)
    emit_check("energy-pairing", worst, fields=n_fields)

    # pseudo-spectral BN against the direct convolution
    oracle_grid = WaveGrid(d=3, M=1.0, modes_per_axis=5,
                           physical_points_per_axis=8)
    oracle_rho = CutoffProfile(kind="sharp", N=2.0)
    oracle_params = cfg.noise_params(1)
    worst = 0.0
    for i in range(2):
        u = sample_divfree_white_noise(oracle_grid, oracle_params, counter=i)
        fast = nonlinearity_BN(u, oracle_rho).coeffs
        slow = bn_convolution_oracle(u, oracle_rho)
        worst = max(worst, float(np.max(np.abs(fast - slow)))
                    / float(np.max(np.abs(slow))))
    emit_check("bn-convolution-oracle", worst)

    # generator structure on small boxes: L_theta symmetry, raising/lowering
    # anti-symmetry, exact chaos grading
    combos = [
        (WaveGrid(d=2, M=1.0, modes_per_axis=5, physical_points_per_axis=8),
         CutoffProfile(kind="sharp", N=2.0), (1, 2)),
        (WaveGrid(d=3, M=1.0, modes_per_axis=3, physical_points_per_axis=4),
         CutoffProfile(kind="sharp", N=1.9), (1, 2)),
        (WaveGrid(d=2, M=1.0, modes_per_axis=5, physical_points_per_axis=8),
         CutoffProfile(kind="sharp", N=2.0), (2, 3)),
    ]
    gen = make_generator(cfg.master_seed, "operator", "chaos")
    worst_sym = worst_dual = 0.0
    grading_ok = True
    for grid_c, rho_c, (low, high) in combos:
        for _ in range(n_pairs):
            phi = _random_chaos_vector(grid_c, gen, (low,))
            phi_b = _random_chaos_vector(grid_c, gen, (low,))
            psi = _random_chaos_vector(grid_c, gen, (high,))
            lp = apply_L_theta(phi, cfg.dynamics.theta)
            lq = apply_L_theta(phi_b, cfg.dynamics.theta)
            a = fock_inner(lp, phi_b)
            b = fock_inner(phi, lq)
            worst_sym = max(worst_sym, abs(a - b) / max(abs(a), 1e-300))
            up = apply_G_plus(phi, rho_c)
            down = apply_G_minus(psi, rho_c)
            grading_ok = grading_ok and up.levels == [low + 1]
            grading_ok = grading_ok and down.levels == [high - 1]
            grading_ok = grading_ok and lp.levels == phi.levels
            raised = fock_inner(up, psi)
            lowered = fock_inner(phi, down)
            scale = max(abs(raised), abs(lowered), 1e-300)
            worst_dual = max(worst_dual, abs(raised + lowered) / scale)
    emit_check("ltheta-symmetric", worst_sym, pairs=n_pairs)
    emit_check("generator-antisymmetry", worst_dual, pairs=n_pairs)
    emit_check("chaos-grading", 0.0 if grading_ok else 1.0)


# ---------------------------------------------------------------------------
# vartheta-limit


def run_vartheta_limit(cfg: ExperimentConfig, em: Emitter, workers) -> None:
    sec = kind_section(cfg)
    n_list = sec.get_floats("N_list", [4, 8, 16, 32, 64])
    kappas = sec.get_modes("kappas", [(1, 0, 0), (1, 1, 0), (2, 1, 1)])
    lam = sec.get_float("lam", 1.0)
    tol = sec.get_float("sandwich_tol", 1e-12)
    sec.finish()
    del workers
    d = cfg.d
    limit = vartheta_limit(d)

    all_sandwich = True
    devs_at_max = []
    n_max = max(n_list)
    for n_cut in n_list:
        for kappa in kappas:
            if len(kappa) != d:
                raise ConfigError(f"kappa {kappa} does not match d = {d}")
            value = vartheta_N(kappa, lam, n_cut, d)
            k_n = np.asarray(kappa, dtype=float) / n_cut
            lens_lo = theta_integral(k_n, 1.0, lam / n_cut**2, d)
            lens_hi = theta_integral(k_n, 1.0 + 1.0 / n_cut, lam / n_cut**2, d)
            sandwich = (lens_lo <= value * (1 + tol)
                        and value <= lens_hi * (1 + tol))
            all_sandwich = all_sandwich and sandwich
            dev = abs(value - limit) / limit
            if n_cut == n_max:
                devs_at_max.append(dev)
            em.emit("point", {
                "N": float(n_cut), "kappa": list(kappa), "lam": lam, "d": d,
            }, {
                "vartheta": stat(value),
                "theta_lens_lower": stat(lens_lo),
                "theta_lens_upper": stat(lens_hi),
                "limit": stat(limit),
                "sandwich_ok": stat(1.0 if sandwich else 0.0),
                "dev_from_limit": stat(dev),
            })
    em.emit("summary", {
        "lam": lam, "d": d, "N_max": float(n_max),
        "kappas": [list(k) for k in kappas],
    }, {
        "all_sandwich_ok": stat(1.0 if all_sandwich else 0.0),
        "max_dev_at_N_max": stat(max(devs_at_max)),
        "limit": stat(limit),
    })


# ---------------------------------------------------------------------------
# dispatch


RUNNERS = {
    "invariance": run_invariance,
    "energy-identity": run_energy_identity,
    "triviality-scan": run_triviality_scan,
    "diffusivity-scan": run_diffusivity_scan,
    "weak-coupling-2d": run_weak_coupling_2d,
    "noise-equivalence": run_noise_equivalence,
    "operator-checks": run_operator_checks,
    "vartheta-limit": run_vartheta_limit,
}


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   append_records: bool = False):
    """Execute one experiment; returns (exit code, records, records path).

    Exit code 0 on success, 3 when any parameter point aborted numerically
    (records for the completed points are still written).  Configuration
    errors raise ConfigError before anything runs.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    em = Emitter(cfg)
    code = 0
    try:
        RUNNERS[cfg.kind](cfg, em, workers)
    except (SimulationError, StationarityError) as exc:
        em.emit("abort", {"error": str(exc)}, {}, status="numerical-abort")
        code = 3
    path = em.flush(append=append_records)
    if cfg.emit_csv or cfg.emit_figures:
        from .reporting import emit_summary
        emit_summary(em.records, cfg.out_dir, figures=cfg.emit_figures)
    return code, em.records, path
