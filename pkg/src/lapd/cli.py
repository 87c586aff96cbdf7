"""Command line entry point: ``lapd run`` and ``lapd template``."""

from __future__ import annotations

import argparse
import sys

from .harness import SCHEMAS, emit_config_template, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapd", description="Langevin algorithm with prior diffusion: experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its CSV")
    run.add_argument("--config", help="key=value config file with a single [experiment] header")
    run.add_argument("--experiment", help=f"one of: {', '.join(SCHEMAS)}")
    run.add_argument("--seed", type=int, help="base seed (overrides the config)")
    run.add_argument("--out", default=".", help="output directory for the CSV")
    run.add_argument("--chains", type=int, help="number of chains (overrides the config)")
    run.add_argument("--assert", dest="check", action="store_true", help="exit non-zero if any check fails")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="repeatable config override")

    tpl = sub.add_parser("template", help="print a commented config template")
    tpl.add_argument("experiment")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "template":
            sys.stdout.write(emit_config_template(args.experiment))
            return 0
        overrides = list(args.override)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        result = run_experiment(args.experiment, args.config, overrides, args.out, chains=args.chains)
    except ValueError as exc:
        print(f"lapd: error: {exc}", file=sys.stderr)
        return 2
    if args.check and not result.passed:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
