"""Command-line entry point: ``hssm-enkf <experiment> [--seed ...] [--set key=value ...]``."""

import argparse
import logging
import sys

from ..errors import HssmError
from .config import SUBCOMMANDS, RunConfig, parse_overrides, read_override_file
from .io import emit_run


def _runner(name):
    # imported lazily so ``--help`` stays fast
    if name == "fig2":
        from .fig2 import run_fig2 as fn
    elif name == "table2":
        from .table2 import run_table2 as fn
    elif name == "table3":
        from .table3 import run_table3 as fn
    elif name == "table4":
        from .table4 import run_table4 as fn
    else:
        from .custom import run_custom as fn
    return fn


def build_parser():
    parser = argparse.ArgumentParser(prog="hssm-enkf", description="Run desk-scale simulation studies.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {SUBCOMMANDS[name]} experiment")
        p.add_argument("--seed", type=int, default=0, help="64-bit master seed (default 0)")
        p.add_argument("--scale", type=float, default=0.2, help="fraction of the full replication counts (default 0.2)")
        p.add_argument("--out", default=None, help="output directory (default runs/<experiment>-seed<seed>)")
        p.add_argument("--workers", type=int, default=1, help="worker processes; results do not depend on it")
        p.add_argument("--data", default=None, help="cloud counts CSV for table3 (default: simulated surrogate)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a setting; repeatable")
        p.add_argument("--config", default=None, help="file of key=value lines, applied before --set")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args):
    overrides = read_override_file(args.config) if args.config else {}
    overrides.update(parse_overrides(args.overrides))
    experiment = SUBCOMMANDS[args.command]
    out = args.out or f"runs/{experiment}-seed{args.seed}"
    return RunConfig(experiment, args.seed, args.scale, overrides, out, args.workers, args.data)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        fn = _runner(args.command)
        if args.command == "table3" and config.data:
            from .io import ingest_cloud_csv

            dataset = ingest_cloud_csv(config.data, seed=config.seed, holdout=float(config.get("holdout", 0.1)))
            outputs = fn(config, dataset)
        else:
            outputs = fn(config)
        out_dir = emit_run(outputs, config)
    except (HssmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for row in outputs.scores:
        print(f"{row['method']:>18s} {row['scenario']:>18s} {row['metric']:>28s} {row['value']:.6g}")
    print(f"wrote {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
