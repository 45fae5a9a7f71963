"""Effective-viscosity formulas and trajectory-based diffusivity estimation.

The closed forms: the d = 2 weak-coupling viscosity sqrt(1 + lambda_hat^2 /
(2 pi)) is a proven limit; for d >= 3 the corresponding expression with
omega_d / (4 pi^2 (d-2)) is conjectural and every consumer labels it so.
g_hat carries the same content in physical constants (thermal energy kBT,
viscosity nu, mass density rho), related through the normalization
A = sqrt(rho / kBT), r = 1 / nu that maps the fluctuating-hydrodynamics
equation onto the unit-coefficient form.

Estimation inverts the large-scale limit equation
    d_t u = nu_eff Laplace u + sqrt(2 nu_eff) (-Laplace)^(1/2) P xi,
whose mode autocorrelations decay like exp(-nu_eff (2 pi |k|)^2 tau): a
pooled weighted through-origin fit of -log C_k(tau)/C_k(0) against
(2 pi |k|)^2 tau over the recorded low modes, with a bootstrap interval over
ensemble members.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory


class StationarityError(RuntimeError):
    """The probe series drifts too much to be treated as stationary."""


def omega_d(d: int) -> float:
    """Surface area of the unit sphere in R^d, d pi^(d/2) / Gamma(1 + d/2)."""
    if int(d) != d or d < 2:
        raise ValueError("d must be an integer >= 2")
    return d * math.pi ** (d / 2) / math.gamma(1 + d / 2)


def nu_eff(d: int, lambda_hat: float) -> float:
    """Predicted large-scale effective viscosity at coupling lambda_hat.

    d = 2 evaluates the proven weak-coupling formula sqrt(1 + lambda_hat^2 /
    (2 pi)); d >= 3 evaluates the conjectured sqrt(1 + lambda_hat^2 omega_d /
    (4 pi^2 (d - 2))).  Check nu_eff_label(d) for which one applies.
    """
    if d == 2:
        return math.sqrt(1.0 + lambda_hat**2 / (2 * math.pi))
    return math.sqrt(1.0 + lambda_hat**2 * omega_d(d) / (4 * math.pi**2 * (d - 2)))


def nu_eff_label(d: int) -> str:
    """Status of the nu_eff formula in dimension d, for output metadata."""
    return "theorem" if d == 2 else "conjecture"


def g_hat(lambda_hat: float, nu: float, kBT: float, rho_density: float,
          d: int) -> float:
    """Diffusivity enhancement factor of the fluctuating-hydrodynamics limit.

    G(lambda_hat) = sqrt(1 + lambda_hat^2 kBT omega_d / (4 nu^2 rho pi^2 (d-2)))
    for d >= 3; equals nu_eff(d, lambda_hat sqrt(kBT / (rho nu^2))).
    """
    if d < 3:
        raise ValueError("the physical-constant form needs d >= 3")
    _check_positive(nu=nu, kBT=kBT, rho_density=rho_density)
    return math.sqrt(1.0 + lambda_hat**2 * kBT * omega_d(d)
                     / (4 * nu**2 * rho_density * math.pi**2 * (d - 2)))


def ll_normalization(nu: float, kBT: float, rho_density: float) -> tuple[float, float]:
    """Amplitude/time rescaling (A, r) = (sqrt(rho / kBT), 1 / nu) that brings
    the fluctuating-hydrodynamics equation to unit viscosity and noise."""
    _check_positive(nu=nu, kBT=kBT, rho_density=rho_density)
    return math.sqrt(rho_density / kBT), 1.0 / nu


def _check_positive(**named: float) -> None:
    for name, value in named.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


@dataclass
class DiffusivityEstimate:
    """Fitted effective viscosity with a bootstrap interval over members."""

    nu_hat: float
    ci_low: float
    ci_high: float
    modes_used: list
    fit_window: tuple
    residual: float

    def __post_init__(self):
        if not self.nu_hat > 0:
            raise ValueError(f"fitted viscosity must be positive, got {self.nu_hat}")
        if not self.ci_low <= self.nu_hat <= self.ci_high:
            raise ValueError("bootstrap interval does not cover the point estimate")


def _group_probes_by_mode(probes, M: float, max_abs_k: float):
    """Indices of probe columns per integer mode with |kappa| / M <= max_abs_k."""
    groups: dict = {}
    for idx, (_, kappa) in enumerate(probes):
        kappa = tuple(int(x) for x in kappa)
        k_abs = math.sqrt(sum(x * x for x in kappa)) / M
        if 0 < k_abs <= max_abs_k:
            groups.setdefault(kappa, []).append(idx)
    return groups


def _member_autocorrelation(series: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Time-averaged lagged products per member, (members, lags) real.

    series has shape (records, members, columns); columns (the components of
    one mode) are summed, time origins averaged.
    """
    records = series.shape[0]
    out = np.empty((series.shape[1], len(lags)))
    for j, lag in enumerate(lags):
        prod = series[lag:] * np.conj(series[: records - lag])
        out[:, j] = np.sum(prod.real, axis=(0, 2)) / (records - lag)
    return out


def _fit_through_origin(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(w * x * y) / np.sum(w * x * x))


def _pooled_fit(corr: np.ndarray, x_grid: np.ndarray):
    """Weighted through-origin slope from per-member correlations.

    corr has shape (members, modes, 1 + lags); column 0 is C_k(0).  Only
    points whose pooled correlation is resolved at 3 standard errors enter the
    fit: past that depth the log of a noise-dominated positive value stops
    growing with the lag and biases the slope low.  The fit runs twice: a
    pilot unweighted pass on strongly resolved points sets a model decay, and
    the final pass weights by the model-predicted inverse variance of the
    log-ratio.  Weighting by the measured correlation instead would couple
    the weight to the same fluctuation as the log and bias the slope.
    """
    members = corr.shape[0]
    pooled = corr.mean(axis=0)
    c0 = pooled[:, :1]
    ratio = pooled[:, 1:] / c0
    se = corr[:, :, 1:].std(axis=0, ddof=1) / math.sqrt(members)
    good = (c0 > 0) & (se > 0) & (pooled[:, 1:] > 3 * se)
    if not np.any(good):
        return np.nan, np.nan, 0
    x_full = np.broadcast_to(x_grid, ratio.shape)
    strong = good & (pooled[:, 1:] > 10 * se)
    pilot = strong if strong.sum() >= 2 else good
    slope0 = _fit_through_origin(x_full[pilot], -np.log(ratio[pilot]),
                                 np.ones(int(pilot.sum())))
    model = c0 * np.exp(-max(slope0, 0.0) * x_grid)
    y = -np.log(ratio[good])
    x = x_full[good]
    w = (model[good] / se[good]) ** 2
    slope = _fit_through_origin(x, y, w)
    resid = math.sqrt(float(np.sum(w * (y - slope * x) ** 2) / np.sum(w)))
    return slope, resid, int(good.sum())


def estimate_diffusivity(traj: Trajectory, fit_window: tuple | None = None,
                         max_abs_k: float | None = None, n_bootstrap: int = 200,
                         seed: int = 0, drift_sigmas: float = 3.0,
                         min_points: int = 4) -> DiffusivityEstimate:
    """Fit nu_eff from the mode autocorrelations of a stationary ensemble run.

    Args:
      traj: trajectory with probe records; members form the ensemble.
      fit_window: (tau_lo, tau_hi) lag interval; default uses lags from one
        record spacing up to a quarter of the recorded span, capped at 40.
      max_abs_k: largest |k| used; default cutoff N / 4, where the effective
        large-scale equation is trusted.
      n_bootstrap/seed: resamples of members for the 95% interval.
      drift_sigmas: refusal threshold on the probe-band energy drift between
        the two halves of the series, in units of its member-spread error.
      min_points: least number of usable (mode, lag) points for a fit.

    Raises StationarityError when the energy drift exceeds the threshold and
    ValueError when the data cannot support a fit.
    """
    if traj.probe_series is None or not len(traj.probes):
        raise ValueError("trajectory carries no probe records")
    series = traj.probe_series
    records, members, _ = series.shape
    if members < 2:
        raise ValueError("need at least 2 members for spread and bootstrap")
    times = np.asarray(traj.times)
    spacing = float(times[1] - times[0]) if records > 1 else 0.0
    if records < 8 or spacing <= 0:
        raise ValueError("need at least 8 uniformly spaced records")

    grid_m = traj.grid.M
    if max_abs_k is None:
        max_abs_k = traj.config.N / 4.0
    groups = _group_probes_by_mode(traj.probes, grid_m, max_abs_k)
    if not groups:
        raise ValueError(f"no probed modes with 0 < |k| <= {max_abs_k:.4g}")

    # stationarity: drift of the probe-band energy between the two halves,
    # measured against the spread of the per-member drifts
    energy = np.sum(np.abs(series) ** 2, axis=2)  # (records, members)
    half = records // 2
    drift = energy[half:].mean(axis=0) - energy[:half].mean(axis=0)
    scale = energy.mean()
    se_drift = drift.std(ddof=1) / math.sqrt(members)
    z_drift = abs(float(drift.mean())) / se_drift if se_drift > 0 else 0.0
    if z_drift > drift_sigmas:
        raise StationarityError(
            f"probe-band energy drifts by {drift.mean():.3e} "
            f"({z_drift:.1f} sigma, relative {drift.mean() / scale:.2e}); "
            "the ensemble does not look stationary")

    if fit_window is None:
        hi = min(records // 4, 40)
        lags = np.arange(1, max(hi, 2))
    else:
        lo, hi = fit_window
        first = max(1, round(lo / spacing))
        last = min(int(hi / spacing), records - 1)
        lags = np.arange(first, last + 1)
    if len(lags) == 0:
        raise ValueError("fit window leaves no usable lags")

    modes = sorted(groups)
    corr = np.empty((members, len(modes), 1 + len(lags)))
    x_grid = np.empty((len(modes), len(lags)))
    for i, kappa in enumerate(modes):
        cols = series[:, :, groups[kappa]]
        corr[:, i, :] = _member_autocorrelation(cols, np.concatenate(([0], lags)))
        k_abs = math.sqrt(sum(x * x for x in kappa)) / grid_m
        x_grid[i] = (2 * math.pi * k_abs) ** 2 * lags * spacing

    slope, resid, n_points = _pooled_fit(corr, x_grid)
    if not np.isfinite(slope) or n_points < min_points:
        raise ValueError(f"only {n_points} usable fit points (need {min_points})")

    rng = np.random.default_rng(seed)
    boots = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        pick = rng.integers(0, members, size=members)
        boots[b], _, _ = _pooled_fit(corr[pick], x_grid)
    boots = boots[np.isfinite(boots)]
    if len(boots) < n_bootstrap // 2:
        raise ValueError("bootstrap fits mostly degenerate; data too noisy")
    lo_q, hi_q = np.percentile(boots, [2.5, 97.5])

    return DiffusivityEstimate(
        nu_hat=float(slope),
        ci_low=float(min(lo_q, slope)),
        ci_high=float(max(hi_q, slope)),
        modes_used=[tuple(kappa) for kappa in modes],
        fit_window=(float(lags[0] * spacing), float(lags[-1] * spacing)),
        residual=float(resid),
    )
