#!/usr/bin/env python3
"""Run the full default benchmark end to end for one seed.

Equivalent to:

    planmerge simulate|train|merge|evaluate|ablate|report --seed S --out DIR

but as a single invocation, printing per-stage wall time.
"""

import argparse
import time

from planmerge.experiment import (
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

STAGES = (
    ("simulate", stage_simulate),
    ("train", stage_train),
    ("merge", stage_merge),
    ("evaluate", stage_evaluate),
    ("ablate", stage_ablate),
    ("report", stage_report),
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None, help="config JSON (default: built-in benchmark)")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--skip-ablate", action="store_true")
    args = parser.parse_args()

    cfg = load_config(args.config) if args.config else default_config()
    cfg = resolve_config(cfg, seed=args.seed, out_dir=args.out)
    total = time.perf_counter()
    for name, stage in STAGES:
        if args.skip_ablate and name == "ablate":
            continue
        t0 = time.perf_counter()
        stage(cfg, jobs=args.jobs)
        print(f"[{name}] {time.perf_counter() - t0:.1f}s")
    print(f"[total] {time.perf_counter() - total:.1f}s -> {args.out}")


if __name__ == "__main__":
    main()
