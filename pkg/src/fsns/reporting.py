"""CSV summaries and figures for experiment record streams.

`emit_summary` turns the records of one experiment into a flat `summary.csv`
next to the NDJSON and, when asked, renders one diagnostic figure per
experiment kind into the same directory.  The CSV has one row per record;
its columns are the union of the parameter keys and the observable names in
order of first appearance, so the schema is stable for a given kind.  Cells
that a record does not provide stay empty, list-valued parameters are
space-joined, and observables expand into up to four columns
(`name`, `name_var`, `name_ci_low`, `name_ci_high`), the extra three only
when some record actually carries them.

Figures use the Agg backend so the report path works without a display.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

__all__ = ["emit_summary", "records_table", "write_table"]


# ---------------------------------------------------------------------------
# CSV


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return " ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        if all(isinstance(v, (list, tuple)) for v in value):
            return "; ".join(",".join(str(x) for x in v) for v in value)
        return json.dumps(value)
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True)
    return value


def records_table(records):
    """Flatten records into (fieldnames, rows) for a DictWriter."""
    param_keys: list = []
    obs_cols: list = []
    seen_extra: set = set()
    for rec in records:
        for key in rec.params:
            if key not in param_keys:
                param_keys.append(key)
        for name, entry in rec.observables.items():
            if name not in obs_cols:
                obs_cols.append(name)
            for part in ("variance", "ci_low", "ci_high"):
                if entry.get(part) is not None:
                    seen_extra.add((name, part))

    fieldnames = ["experiment", "label", "status"] + param_keys
    for name in obs_cols:
        fieldnames.append(name)
        for part, suffix in (("variance", "_var"), ("ci_low", "_ci_low"),
                             ("ci_high", "_ci_high")):
            if (name, part) in seen_extra:
                fieldnames.append(name + suffix)

    rows = []
    for rec in records:
        row = {"experiment": rec.experiment, "label": rec.label,
               "status": rec.status}
        for key, value in rec.params.items():
            row[key] = _cell(value)
        for name, entry in rec.observables.items():
            row[name] = _cell(entry.get("mean"))
            for part, suffix in (("variance", "_var"), ("ci_low", "_ci_low"),
                                 ("ci_high", "_ci_high")):
                if (name, part) in seen_extra:
                    row[name + suffix] = _cell(entry.get(part))
        rows.append(row)
    return fieldnames, rows


def write_table(records, path: str) -> None:
    fieldnames, rows = records_table(records)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames,
                                extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Figures


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _ok(records, label=None, suffix=None):
    out = []
    for rec in records:
        if rec.status != "ok":
            continue
        if label is not None and rec.label != label:
            continue
        if suffix is not None and not rec.label.endswith(suffix):
            continue
        out.append(rec)
    return out


def _mean(rec, name, default=None):
    entry = rec.observables.get(name)
    if entry is None or entry.get("mean") is None:
        return default
    return entry["mean"]


def _ci_err(rec, name):
    entry = rec.observables.get(name, {})
    mean, lo, hi = entry.get("mean"), entry.get("ci_low"), entry.get("ci_high")
    if mean is None or lo is None or hi is None:
        return 0.0, 0.0
    return mean - lo, hi - mean


def _fig_invariance(records, plt):
    probes = _ok(records, suffix="/probe")
    summaries = [r for r in _ok(records) if not r.label.endswith("/probe")]
    if not probes:
        return None
    alpha = None
    sigmas = None
    for rec in summaries:
        alpha = rec.params.get("bonferroni_alpha", alpha)
        sigmas = rec.params.get("drift_sigmas", sigmas)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    runs = sorted({r.params.get("run", "run") for r in probes})
    for run in runs:
        sel = [r for r in probes if r.params.get("run") == run]
        xs = np.arange(len(sel))
        ax1.semilogy(xs, [_mean(r, "ks_p", 1.0) for r in sel], "o",
                     ms=4, label=run)
        ax2.plot(xs, [_mean(r, "drift_z", 0.0) for r in sel], "o",
                 ms=4, label=run)
    if alpha:
        ax1.axhline(alpha, color="r", lw=0.8, ls="--",
                    label="rejection level")
    ax1.set_xlabel("probe index")
    ax1.set_ylabel("KS p-value")
    ax1.legend(fontsize=8)
    if sigmas:
        ax2.axhline(sigmas, color="r", lw=0.8, ls="--")
        ax2.axhline(-sigmas, color="r", lw=0.8, ls="--")
    ax2.set_xlabel("probe index")
    ax2.set_ylabel("energy drift z")
    ax2.legend(fontsize=8)
    fig.suptitle("stationarity probes")
    return fig


def _fig_checks(records, plt):
    recs = [r for r in _ok(records) if "threshold" in r.observables]
    if not recs:
        return None
    values, labels, threshold = [], [], None
    for rec in recs:
        names = [n for n in rec.observables if n.startswith("max_rel")]
        if not names:
            continue
        values.append(max(_mean(rec, n, 0.0) for n in names))
        labels.append(rec.label)
        threshold = _mean(rec, "threshold", threshold)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels)), 3.5))
    xs = np.arange(len(labels))
    floor = 1e-18
    ax.bar(xs, np.maximum(values, floor), width=0.6)
    ax.set_yscale("log")
    if threshold:
        ax.axhline(threshold, color="r", lw=0.8, ls="--", label="tolerance")
        ax.legend(fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("worst relative error")
    fig.tight_layout()
    return fig


def _fig_triviality(records, plt):
    points = [r for r in _ok(records) if "mean_sq_integral" in r.observables]
    scans = _ok(records, label="scan")
    if not points:
        return None
    ns = np.array([r.params["N"] for r in points], dtype=float)
    ys = np.array([_mean(r, "mean_sq_integral") for r in points], dtype=float)
    err = np.array([_ci_err(r, "mean_sq_integral") for r in points]).T
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.errorbar(ns, ys, yerr=err, fmt="o", ms=4, capsize=3, label="measured")
    order = np.argsort(ns)
    if scans:
        slope = _mean(scans[-1], "slope")
        expected = scans[-1].params.get("expected_slope")
        anchor_n, anchor_y = ns[order[0]], ys[order[0]]
        grid = np.geomspace(ns.min(), ns.max(), 64)
        if slope is not None:
            ax.plot(grid, anchor_y * (grid / anchor_n) ** slope, "-",
                    lw=1, label=f"fit slope {slope:.2f}")
        if expected is not None:
            ax.plot(grid, anchor_y * (grid / anchor_n) ** expected, "--",
                    lw=1, color="gray", label=f"slope {expected:g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("cutoff N")
    ax.set_ylabel("mean squared functional")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _fig_diffusivity(records, plt):
    points = [r for r in _ok(records) if "nu_hat" in r.observables
              and "lambda_hat" in r.params]
    if not points:
        return None
    lams = np.array([r.params["lambda_hat"] for r in points], dtype=float)
    nus = np.array([_mean(r, "nu_hat") for r in points], dtype=float)
    err = np.array([_ci_err(r, "nu_hat") for r in points]).T
    preds = np.array([_mean(r, "nu_eff_predicted", np.nan) for r in points],
                     dtype=float)
    order = np.argsort(lams)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.errorbar(lams[order], nus[order], yerr=err[:, order], fmt="o", ms=4,
                capsize=3, label="estimated")
    if np.isfinite(preds).all():
        ax.plot(lams[order], preds[order], "--", lw=1, color="gray",
                label="predicted")
    ax.axhline(1.0, color="k", lw=0.5)
    ax.set_xlabel(r"coupling $\hat\lambda$")
    ax.set_ylabel("effective diffusivity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _fig_weak_coupling(records, plt):
    points = [r for r in _ok(records) if "abs_error" in r.observables]
    if not points:
        return None
    ns = np.array([r.params["N"] for r in points], dtype=float)
    errs = np.array([_mean(r, "abs_error") for r in points], dtype=float)
    nus = np.array([_mean(r, "nu_hat") for r in points], dtype=float)
    yerr = np.array([_ci_err(r, "nu_hat") for r in points]).T
    pred = _mean(points[-1], "nu_eff_predicted")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.errorbar(ns, nus, yerr=yerr, fmt="o", ms=4, capsize=3)
    if pred is not None:
        ax1.axhline(pred, color="gray", ls="--", lw=1, label="predicted")
        ax1.legend(fontsize=8)
    ax1.set_xscale("log")
    ax1.set_xlabel("cutoff N")
    ax1.set_ylabel("effective diffusivity")
    ax2.loglog(ns, errs, "o-", ms=4)
    ax2.set_xlabel("cutoff N")
    ax2.set_ylabel("|estimate - prediction|")
    fig.tight_layout()
    return fig


def _fig_noise(records, plt):
    points = _ok(records, label="mode")
    if not points:
        return None
    labels = [" ".join(str(int(v)) for v in r.params["kappa"]) for r in points]
    pvals = [_mean(r, "p_value", 1.0) for r in points]
    alpha = points[0].params.get("bonferroni_alpha")
    xs = np.arange(len(points))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(points)), 3.5))
    ax.bar(xs, pvals, width=0.6)
    ax.set_yscale("log")
    if alpha:
        ax.axhline(alpha, color="r", lw=0.8, ls="--", label="rejection level")
        ax.legend(fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_xlabel("mode")
    ax.set_ylabel("covariance test p-value")
    fig.tight_layout()
    return fig


def _fig_vartheta(records, plt):
    points = _ok(records, label="point")
    if not points:
        return None
    limit = _mean(points[0], "limit")
    groups: dict = {}
    for rec in points:
        groups.setdefault(tuple(rec.params["kappa"]), []).append(rec)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for kappa, recs in sorted(groups.items()):
        ns = np.array([r.params["N"] for r in recs], dtype=float)
        vals = np.array([_mean(r, "vartheta") for r in recs], dtype=float)
        lo = np.array([_mean(r, "theta_lens_lower") for r in recs], dtype=float)
        hi = np.array([_mean(r, "theta_lens_upper") for r in recs], dtype=float)
        order = np.argsort(ns)
        name = ",".join(str(int(v)) for v in kappa)
        line, = ax.plot(ns[order], vals[order], "o-", ms=4,
                        label=rf"$\kappa$=({name})")
        ax.fill_between(ns[order], lo[order], hi[order], alpha=0.15,
                        color=line.get_color())
    if limit is not None:
        ax.axhline(limit, color="k", lw=0.8, ls="--", label="limit")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("cutoff N")
    ax.set_ylabel("mobility sum")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


_FIGURES = {
    "invariance": _fig_invariance,
    "energy-identity": _fig_checks,
    "operator-checks": _fig_checks,
    "triviality-scan": _fig_triviality,
    "diffusivity-scan": _fig_diffusivity,
    "weak-coupling-2d": _fig_weak_coupling,
    "noise-equivalence": _fig_noise,
    "vartheta-limit": _fig_vartheta,
}


def render_figure(records, path: str) -> str | None:
    """Render the kind-appropriate figure for `records`; returns the path."""
    if not records:
        return None
    maker = _FIGURES.get(records[0].experiment)
    if maker is None:
        return None
    plt = _pyplot()
    fig = maker(records, plt)
    if fig is None:
        return None
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_summary(records, out_dir: str, figures: bool = False) -> list:
    """Write summary.csv (and optionally <kind>.png) under `out_dir`."""
    if not records:
        return []
    written = []
    csv_path = os.path.join(out_dir, "summary.csv")
    write_table(records, csv_path)
    written.append(csv_path)
    if figures:
        fig_path = os.path.join(out_dir, f"{records[0].experiment}.png")
        if render_figure(records, fig_path):
            written.append(fig_path)
    return written
