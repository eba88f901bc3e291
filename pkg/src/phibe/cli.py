"""Command-line entry points for the experiment runners.

Subcommands: run-case, dt-sweep, batch-sweep, atlas (each takes a JSON
config), and oracle (prints closed-form quantities for a 1D system).  Exit
codes: 0 on success, 2 on configuration errors, 3 on numerical failures.
"""

import argparse
import sys

from .errors import ConfigError, NumericalError
from .experiments import (
    batch_sweep,
    dt_sweep,
    error_atlas,
    load_config,
    oracle_report,
    run_case,
)


def _add_common(parser: argparse.ArgumentParser, with_reps: bool = True) -> None:
    parser.add_argument("config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's master seed")
    parser.add_argument("--out", default=None,
                        help="output directory (default: the config's 'out', "
                             "else the config name)")
    if with_reps:
        parser.add_argument("--reps", type=int, default=None,
                            help="override the config's repetition count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phibe",
        description="Policy evaluation and iteration experiments for "
                    "continuous-time RL from discrete-time data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-case", help="run one policy-iteration case")
    _add_common(p)

    p = sub.add_parser("dt-sweep", help="gain error versus time step")
    _add_common(p)
    p.add_argument("--mode", choices=("oracle", "sampled"), default=None,
                   help="override the config's sweep mode")

    p = sub.add_parser("batch-sweep", help="final error versus data volume")
    _add_common(p)

    p = sub.add_parser("atlas", help="analytic error grids over parameters")
    _add_common(p, with_reps=False)

    p = sub.add_parser("oracle", help="print closed-form quantities for a 1D system")
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--Q", type=float, required=True)
    p.add_argument("--R", type=float, required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--orders", type=int, nargs="+", default=[1, 2])
    p.add_argument("--discount", choices=("exp", "optimal"), default="exp")
    return parser


def _out_dir(args, config) -> str:
    if args.out is not None:
        return args.out
    if config.out is not None:
        return config.out
    return config.name


def _dispatch(args) -> int:
    if args.command == "oracle":
        report = oracle_report(args.A, args.B, args.Q, args.R, sigma=args.sigma,
                               beta=args.beta, dt=args.dt, orders=args.orders,
                               discount_choice=args.discount)
        width = max(len(k) for k in report)
        for key, value in report.items():
            print(f"{key:<{width}} = {value!r}")
        return 0

    config = load_config(args.config)
    out = _out_dir(args, config)
    if args.command == "run-case":
        record = run_case(config, out_dir=out, seed=args.seed, reps=args.reps)
    elif args.command == "dt-sweep":
        record = dt_sweep(config, out_dir=out, seed=args.seed, mode=args.mode,
                          reps=args.reps)
    elif args.command == "batch-sweep":
        record = batch_sweep(config, out_dir=out, seed=args.seed, reps=args.reps)
    else:
        record = error_atlas(config, out_dir=out)
    print(f"{record.runner} '{config.name}' wrote {len(record.rows)} rows to {out} "
          f"(config {record.config_hash}, {record.wall_time_s:.2f} s)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
