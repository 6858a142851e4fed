"""Command-line entry point.

Subcommands map to pipeline stages (`run` executes them all in dependency
order). Exit codes: 0 success, 1 configuration/validation error, 2 stage
failure.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import STAGES, ConfigError, ExperimentConfig, Pipeline, StageError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunelens",
        description="Iterative magnitude pruning, probing, and representation-"
                    "similarity analysis for a desk-scale NMT transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="TOML experiment config (defaults are built in)")
        p.add_argument("--out", default="runs/default",
                       help="output directory (default: runs/default)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="rerun stages even when artifacts are up to date")

    run = sub.add_parser("run", help="execute all stages in dependency order")
    add_common(run)
    run.add_argument("--stages", default=None,
                     help="comma-separated subset of stages to run "
                          f"(of: {','.join(STAGES)})")

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.load(args.config, seed=args.seed)
        pipeline = Pipeline(config, args.out, force=args.force)
        if args.command == "run":
            stages = args.stages.split(",") if args.stages else None
            pipeline.run(stages)
        else:
            pipeline.run([args.command])
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except StageError as err:
        print(f"stage error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
