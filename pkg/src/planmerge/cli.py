"""Command-line entry point: simulate | train | merge | evaluate | ablate | report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import PlanMergeError
from .experiment import (
    default_config,
    load_config,
    resolve_config,
    stage_ablate,
    stage_evaluate,
    stage_merge,
    stage_report,
    stage_simulate,
    stage_train,
)

STAGES = {
    "simulate": stage_simulate,
    "train": stage_train,
    "merge": stage_merge,
    "evaluate": stage_evaluate,
    "ablate": stage_ablate,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planmerge",
        description="Checkpoint-merging benchmark pipeline for a small trajectory planner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=Path, default=None,
                       help="experiment config JSON (defaults to the built-in benchmark)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        p.add_argument("--dry-run", action="store_true", help="print the plan without writing")
        p.add_argument("--jobs", type=int, default=1, help="bounded parallelism within the stage")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config is not None else default_config()
        cfg = resolve_config(cfg, seed=args.seed, out_dir=args.out)
        STAGES[args.command](cfg, jobs=args.jobs, dry_run=args.dry_run)
    except PlanMergeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
