"""Command line front end for the simulation harness.

Subcommands:
  run        execute one experiment config (INI), write NDJSON records
  resume     continue an interrupted run from a harness checkpoint
  summarize  merge record files into per-kind CSV tables (and figures)
  predict    evaluate the effective-diffusivity formulas
  check      run the fast operator identity checks and report pass/fail

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 numerical
abort (completed chunks stay on disk as checkpoints when checkpointing is
enabled, so the run can be resumed).  Worker processes default to 1 and can
be set with --workers or the FSNS_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import replace

from .diffusivity import g_hat, nu_eff, nu_eff_label
from .experiments import run_experiment
from .harness import (
    ConfigError,
    WORKERS_ENV,
    checkpoint_experiment_text,
    parse_config,
    parse_config_text,
    read_records,
)
from .reporting import render_figure, write_table

__all__ = ["main"]


def _print_status(records, path) -> None:
    aborted = [r for r in records if r.status != "ok"]
    print(f"{path}: {len(records)} records")
    for rec in aborted:
        print(f"  {rec.label}: {rec.status}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    code, records, path = run_experiment(cfg, workers=args.workers,
                                         append_records=args.append)
    _print_status(records, path)
    return code


def cmd_resume(args) -> int:
    text = checkpoint_experiment_text(args.checkpoint)
    cfg = parse_config_text(text, path=args.checkpoint)
    # The checkpoint lives in <output>/checkpoints/; anchor the output
    # directory there so resuming works from any working directory.
    out_dir = os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint)))
    cfg = replace(cfg, out_dir=out_dir)
    code, records, path = run_experiment(cfg, workers=args.workers)
    _print_status(records, path)
    return code


def cmd_summarize(args) -> int:
    records = read_records(args.records)
    if not records:
        print("no records found", file=sys.stderr)
        return 2
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec.experiment, []).append(rec)
    os.makedirs(args.output, exist_ok=True)
    for kind, recs in sorted(groups.items()):
        csv_path = os.path.join(args.output, f"{kind}.csv")
        write_table(recs, csv_path)
        print(csv_path)
        if args.figures:
            fig_path = render_figure(recs, os.path.join(args.output,
                                                        f"{kind}.png"))
            if fig_path:
                print(fig_path)
    return 0


def cmd_predict(args) -> int:
    if args.quantity != "nu-eff":
        raise ConfigError(f"unknown quantity {args.quantity!r}")
    physical = (args.nu, args.kBT, args.rho_density) != (1.0, 1.0, 1.0)
    try:
        if physical:
            value = g_hat(args.lambda_hat, args.nu, args.kBT,
                          args.rho_density, args.d)
            print(f"{value:.12g}  # enhancement factor, d={args.d}, "
                  f"lambda_hat={args.lambda_hat:g}, nu={args.nu:g}, "
                  f"kBT={args.kBT:g}, rho={args.rho_density:g}")
        else:
            value = nu_eff(args.d, args.lambda_hat)
            print(f"{value:.12g}  # nu_eff, d={args.d}, "
                  f"lambda_hat={args.lambda_hat:g} "
                  f"({nu_eff_label(args.d)})")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return 0


_CHECK_INI = """\
[experiment]
kind = operator-checks
master_seed = {seed}
output = {out}

[grid]
d = 3
M = 1

[dynamics]
theta = 1.0
N = 2
T = 0.02

[output]
csv = false

[operator-checks]
fields = {fields}
chaos_pairs = {pairs}
threshold = {threshold}
"""


def cmd_check(args) -> int:
    if args.what != "all":
        raise ConfigError(f"unknown check suite {args.what!r}")
    out_dir = args.output or tempfile.mkdtemp(prefix="fsns-check-")
    text = _CHECK_INI.format(seed=args.seed, out=out_dir, fields=args.fields,
                             pairs=args.chaos_pairs, threshold=args.threshold)
    cfg = parse_config_text(text, path="<check>")
    code, records, _ = run_experiment(cfg, workers=args.workers)
    if code:
        return code
    failed = 0
    for rec in records:
        if "pass" not in rec.observables:
            continue
        ok = rec.observables["pass"]["mean"] == 1.0
        val = rec.observables["max_rel"]["mean"]
        thr = rec.observables["threshold"]["mean"]
        failed += 0 if ok else 1
        print(f"{rec.label}: {'PASS' if ok else 'FAIL'} "
              f"(max rel {val:.3e}, tolerance {thr:g})")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsns",
        description="Spectral simulation and operator analysis for the "
                    "regularized stochastic Navier-Stokes equation on a torus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config", help="INI experiment description")
    p_run.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    p_run.add_argument("--append", action="store_true",
                       help="append to an existing records.ndjson")
    p_run.set_defaults(func=cmd_run)

    p_res = sub.add_parser("resume", help="continue from a checkpoint file")
    p_res.add_argument("checkpoint", help="file under <output>/checkpoints/")
    p_res.add_argument("--workers", type=int, default=None)
    p_res.set_defaults(func=cmd_resume)

    p_sum = sub.add_parser("summarize",
                           help="merge NDJSON records into CSV tables")
    p_sum.add_argument("records", nargs="+", help="records.ndjson files")
    p_sum.add_argument("-o", "--output", default=".",
                       help="directory for CSV/figure output (default: .)")
    p_sum.add_argument("--figures", action="store_true",
                       help="also render one figure per experiment kind")
    p_sum.set_defaults(func=cmd_summarize)

    p_pred = sub.add_parser("predict", help="evaluate closed-form predictions")
    p_pred.add_argument("quantity", choices=["nu-eff"])
    p_pred.add_argument("--d", type=int, required=True, help="dimension >= 2")
    p_pred.add_argument("--lambda-hat", type=float, required=True,
                        dest="lambda_hat", help="dimensionless coupling")
    p_pred.add_argument("--nu", type=float, default=1.0)
    p_pred.add_argument("--kBT", type=float, default=1.0)
    p_pred.add_argument("--rho-density", type=float, default=1.0,
                        dest="rho_density")
    p_pred.set_defaults(func=cmd_predict)

    p_chk = sub.add_parser("check", help="run the operator identity checks")
    p_chk.add_argument("what", choices=["all"])
    p_chk.add_argument("--threshold", type=float, default=1e-10)
    p_chk.add_argument("--fields", type=int, default=100)
    p_chk.add_argument("--chaos-pairs", type=int, default=8,
                       dest="chaos_pairs")
    p_chk.add_argument("--seed", type=int, default=2024)
    p_chk.add_argument("--workers", type=int, default=None)
    p_chk.add_argument("--output", default=None,
                       help="keep check records here instead of a temp dir")
    p_chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
