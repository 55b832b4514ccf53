"""Command line entry points.

Exit codes: 0 all configured thresholds hold, 1 some threshold failed,
2 the config is invalid or unreadable, 3 a simulation or solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from ._version import __version__
from .errors import ConfigError, EmratesError
from .experiments import OUT_ENV_VAR, load_config, run, validate


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emrates",
        description="Scheme-error rate experiments for irregular-drift diffusions.",
    )
    parser.add_argument("--version", action="version", version=f"emrates {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="TOML config path")
    p_run.add_argument("--seed", type=int, default=None, help="override master_seed")
    p_run.add_argument("--workers", type=int, default=1, help="process pool size")
    p_run.add_argument(
        "--out", default=None, help=f"output directory (default: config, then ${OUT_ENV_VAR})"
    )

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config", help="TOML config path")

    p_plot = sub.add_parser("plot-data", help="dump report rows as gnuplot blocks")
    p_plot.add_argument("report", help="JSON report path")
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config)
    report = run(config, seed=args.seed, workers=args.workers, out_dir=args.out)
    for name, v in sorted(report.verdicts.items()):
        status = "PASS" if v["passed"] else "FAIL"
        print(f"[{status}] {name}: value={v['value']} threshold={v['threshold']}")
    for fmt, path in sorted(report.paths.items()):
        print(f"wrote {fmt}: {path}")
    print(f"verdict: {'PASS' if report.passed else 'FAIL'} ({report.wall_time_s:.1f}s)")
    return 0 if report.passed else 1


def _cmd_validate(args) -> int:
    msgs = validate(load_config(args.config))
    for msg in msgs:
        print(msg)
    if not msgs:
        print("ok")
    return 0 if not msgs else 2


def _cmd_plot_data(args) -> int:
    try:
        with open(args.report) as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    rows = report.get("rows", [])
    names = sorted({row["experiment"] for row in rows})
    # one gnuplot index per experiment: blank-line separated blocks
    for name in names:
        print(f"# {name}: n estimate std_error")
        for row in rows:
            if row["experiment"] == name:
                print(f"{row['n']} {row['estimate']} {row['std_error']}")
        print()
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_plot_data(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EmratesError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
