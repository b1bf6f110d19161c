#!/usr/bin/env python3
"""Run the five-row ablation ladder and print the seed-averaged table.

Example:
    python scripts/run_full_benchmark.py --workdir runs/bench --preset quick --seeds 0,1,2
"""

import argparse
import sys
import time
from pathlib import Path

from flab.bench import run_benchmark
from flab.configio import PRESETS, load_config
from flab.pipeline import Workspace
from flab.utils import apply_thread_limits


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, default=Path("runs/bench"))
    ap.add_argument("--preset", choices=sorted(PRESETS), default="quick")
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    apply_thread_limits()

    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    seeds = [int(s) for s in args.seeds.split(",")]
    ws = Workspace(args.workdir)
    t0 = time.time()
    report = run_benchmark(cfg, ws, seeds)
    print(f"\nbenchmark finished in {time.time() - t0:.0f}s; reports in {ws.reports}\n")
    header = ["system"] + report.classes + ["pooled"]
    print(" ".join(f"{h:>22}" for h in header[:1]) + " ".join(f"{h:>12}" for h in header[1:]))
    for row in report.rows:
        means = report.per_class_mean(row)
        cells = [f"{means.get(c, float('nan')):12.3f}" for c in report.classes]
        print(f"{row:>22}" + "".join(cells) + f"{report.pooled_mean(row):12.3f}")
    if report.errors:
        print("\nerrors:")
        for (row, seed), msg in sorted(report.errors.items()):
            print(f"  {row} seed={seed}: {msg}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
