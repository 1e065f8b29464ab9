#!/usr/bin/env python3
"""
Orlicz Two-Solution Lab - Main Entry Point

Usage:
    python main.py indices --config run.env   # Matuszewska-Orlicz indices of φ
    python main.py solve --config run.env     # u₁, u₂ and the two-solution certificate
    python main.py sweep --config run.env     # λ sweep and λ* bisection
    python main.py verify --config run.env    # randomized property suite
    python main.py history                    # recent runs
    python main.py export --run 3 -o r.json   # stored report of a run
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from app import create_app
from app.config import Config
from app.run_config import ConfigError, load_config
from app.services.experiment import EXIT_CONFIG, EXIT_FAILURE
from app.services.run_service import get_run, list_runs
from app.services.young import QuadratureFailure


def setup_logging(verbosity=0, log_file=None):
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.DEBUG)
    formatter = logging.Formatter(Config.LOG_FORMAT)

    console = logging.StreamHandler(sys.stderr)
    if verbosity >= 2:
        console.setLevel(logging.DEBUG)
    else:
        console.setLevel(getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))
    console.setFormatter(formatter)
    root.addHandler(console)

    if log_file is not None and verbosity >= 1:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, mode="w")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)


def _load(args):
    cfg = load_config(args.config).with_overrides(
        seed=args.seed, output_dir=args.out, workers=getattr(args, "workers", None)
    )
    setup_logging(args.verbosity, Path(cfg.output_dir) / "run.log")
    return cfg


def _execute(args, command):
    try:
        cfg = _load(args)
        app = create_app(deterministic=args.deterministic)
        report, code = getattr(app.runner, command)(cfg)
    except ConfigError as e:
        logging.error(f"Invalid configuration: {e}")
        return None, None, EXIT_CONFIG
    except QuadratureFailure as e:
        logging.error(f"{command} failed: {e}")
        return None, None, EXIT_FAILURE
    return cfg, report, code


def _banner(title):
    print("\n" + "=" * 60)
    print(f"  {title}")
    print("=" * 60)


def _fmt(value, spec=".6e"):
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return format(value, spec)


def cmd_indices(args):
    cfg, report, code = _execute(args, "indices")
    if report is None:
        return code

    _banner(f"Indices of {cfg.phi.label()}")
    print(f"\n  phi0 (lower index): {report['phi0']:.6f}")
    print(f"  phi0 (upper index): {report['phi0_hi']:.6f}")
    print(f"  Delta2 ratio:       {report['delta2_ratio']:.6f}  (bound {report['delta2_bound']:.6f})")
    print(f"  sqrt-convex:        {_fmt(report['sqrt_convex'])}")
    print(f"  lambda1 estimate:   {report['lambda1']:.6f}")
    print(f"\n  Output: {cfg.output_dir}\n")
    return code


def cmd_solve(args):
    cfg, report, code = _execute(args, "solve")
    if report is None:
        return code

    _banner(f"Solve at lambda={_fmt(report['lambda'], 'g')}  ({cfg.phi.label()}, p={cfg.p:g}, q={cfg.q:g})")
    if report.get("lambda_star_est") is not None:
        print(f"\n  lambda* estimate: {report['lambda_star_est']:.6g}  (factor {cfg.lambda_factor:g})")
    print(f"\n  Status:        {report['status']}")
    print(f"  I(u1):         {_fmt(report['I_u1'])}")
    print(f"  residual(u1):  {_fmt(report['residual_u1'], '.3e')}")
    print(f"  c = J(u2):     {_fmt(report['J_u2'])}")
    print(f"  residual(u2):  {_fmt(report['residual_u2'], '.3e')}")
    print(f"  ring (rho, a): {_fmt(report['ring_rho'], '.4g')}, {_fmt(report['ring_level'])}")
    cert = report.get("certificate")
    if isinstance(cert, dict):
        print("\n  Certificate checks:")
        for name, check in sorted(cert["checks"].items()):
            print(f"    {name:<20} {_fmt(check['value'], '.3e'):>12}  {'ok' if check['passed'] else 'FAILED'}")
    print(f"\n  Exit code: {code}   Output: {cfg.output_dir}\n")
    return code


def cmd_sweep(args):
    cfg, report, code = _execute(args, "sweep")
    if report is None:
        return code

    _banner(f"Lambda sweep ({cfg.phi.label()}, p={cfg.p:g}, q={cfg.q:g})")
    print(f"\n  {'lambda':<14} {'min I':<16} {'c':<16} {'certificate'}")
    print("  " + "-" * 56)
    for row in report["rows"]:
        print(
            f"  {row['lambda']:<14.6g} {_fmt(row['min_I']):<16} {_fmt(row['c']):<16} "
            f"{_fmt(row['certificate'])}"
        )
    if report.get("lambda_star_est") is not None:
        print(f"\n  lambda* estimate: {report['lambda_star_est']:.6g}")
    if report.get("error"):
        print(f"\n  {report['error']}")
    print(f"\n  Output: {cfg.output_dir}\n")
    return code


def cmd_verify(args):
    cfg, report, code = _execute(args, "verify")
    if report is None:
        return code

    _banner(f"Property suite for {cfg.phi.label()}")
    print(f"\n  {'property':<36} {'min slack':<14} {'result'}")
    print("  " + "-" * 56)
    for row in report["properties"]:
        print(f"  {row['name']:<36} {row['min_slack']:<14.3e} {'ok' if row['passed'] else 'FAILED'}")
    print(f"\n  All passed: {_fmt(report['passed'])}   Output: {cfg.output_dir}\n")
    return code


def cmd_history(args):
    setup_logging(args.verbosity)
    app = create_app()
    with app.app_context():
        runs = list_runs(limit=args.limit, command=args.command_filter)

    _banner("Run history")
    if not runs:
        print("\n  No runs recorded yet.\n")
        return 0
    print(f"\n  {'id':<5} {'command':<8} {'phi':<24} {'lambda':<10} {'status':<18} {'exit'}")
    print("  " + "-" * 72)
    for run in runs:
        lam = f"{run['lambda']:.6g}" if run["lambda"] is not None else "-"
        print(f"  {run['id']:<5} {run['command']:<8} {run['phi'] or '-':<24} {lam:<10} {run['status']:<18} {run['exit_code']}")
    print()
    return 0


def cmd_export(args):
    setup_logging(args.verbosity)
    app = create_app()
    with app.app_context():
        run = get_run(args.run)
    if run is None:
        logging.error(f"Run {args.run} not found")
        return 1

    if args.format == "json":
        with open(args.output, "w") as f:
            json.dump(run, f, indent=2, sort_keys=True, default=str)
    else:
        rows = run["sweep"] or [{k: run[k] for k in ("lambda", "I_u1", "c", "certificate", "status")}]
        with open(args.output, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    print(f"Exported run {args.run} to {args.output}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Orlicz Two-Solution Lab - minimizer and mountain-pass solutions of a φ-Laplacian problem",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py solve --config configs/power3.env --deterministic
  python main.py sweep --config sweep.env --workers 4
  python main.py verify --config run.env -v
  python main.py export --run 1 --format csv -o run1.csv
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    def experiment_parser(name, help_text):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="KEY=VALUE run configuration file")
        sub.add_argument("--seed", type=int, default=None, help="Override the config seed")
        sub.add_argument("--out", default=None, help="Override the output directory")
        sub.add_argument(
            "--deterministic", action="store_true", default=Config.DETERMINISTIC,
            help="Omit wall-clock timings so reports are byte-identical",
        )
        sub.add_argument(
            "--verbosity", type=int, default=0,
            help="1 writes run.log with per-iteration lines, 2 also echoes them",
        )
        sub.add_argument("-v", dest="verbosity", action="count", help="Same as --verbosity, repeatable")
        return sub

    experiment_parser("indices", "Estimate the indices of φ").set_defaults(func=cmd_indices)
    experiment_parser("solve", "Compute u1, u2 and the certificate at a fixed λ").set_defaults(func=cmd_solve)

    sweep_parser = experiment_parser("sweep", "Sweep λ and bracket λ*")
    sweep_parser.add_argument("--workers", type=int, default=None, help="Parallel λ evaluations")
    sweep_parser.set_defaults(func=cmd_sweep)

    experiment_parser("verify", "Run the randomized property suite").set_defaults(func=cmd_verify)

    history_parser = subparsers.add_parser("history", help="Show recent runs")
    history_parser.add_argument("-n", "--limit", type=int, default=20, help="Number of runs")
    history_parser.add_argument("-c", "--command", dest="command_filter", default=None, help="Only this command")
    history_parser.add_argument("-v", "--verbosity", action="count", default=0, help="Log verbosity")
    history_parser.set_defaults(func=cmd_history)

    export_parser = subparsers.add_parser("export", help="Export a stored run")
    export_parser.add_argument("--run", type=int, required=True, help="Run id")
    export_parser.add_argument("-o", "--output", default="run.json", help="Output file")
    export_parser.add_argument(
        "-f", "--format", choices=["json", "csv"], default="json", help="Output format"
    )
    export_parser.add_argument("-v", "--verbosity", action="count", default=0, help="Log verbosity")
    export_parser.set_defaults(func=cmd_export)

    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
