"""Command-line entry point: ``bots run|sweep|plotdata``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import experiment
from .config import load_experiment, load_sweep
from .errors import BotsError, ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _pm(mean: float, se: float) -> str:
    return f"{mean:.2f}" if math.isnan(se) else f"{mean:.2f} +/- {se:.2f}"


def cmd_run(args) -> int:
    cfg = load_experiment(args.config, seed=args.seed)
    agg = experiment.run_experiment(cfg, Path(args.out), jobs=args.jobs)
    print(f"{cfg.name}: {cfg.method} on {cfg.environment}, {agg['repetitions']} reps, "
          f"average return {_pm(agg['mean_avg_return'], agg['stderr'])}")
    print(f"artifacts in {Path(args.out) / cfg.name}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    sweep = load_sweep(args.config, seed=args.seed)
    rows = experiment.run_sweep(sweep, Path(args.out), jobs=args.jobs)
    for row in rows:
        print(f"{row['cell']}: {_pm(row['mean_avg_return'], row['stderr'])}")
    print(f"sweep table in {Path(args.out) / sweep.base.name / 'sweep.csv'}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    target = experiment.write_plotdata(Path(args.sweep_dir), Path(args.out) if args.out else None)
    print(f"wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bots", description="Batch BO over Thompson-sampling action biases.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--seed", type=int, default=None, help="override the config's base seed")
        p.add_argument("--out", default=out_default, help=f"output root (default {out_default})")

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    common(p, "runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every cell of a grid config")
    p.add_argument("config")
    common(p, "runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plotdata", help="long-format CSV from a finished sweep")
    p.add_argument("sweep_dir")
    p.add_argument("--out", default=None, help="output CSV (default <sweep_dir>/plotdata.csv)")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BotsError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
