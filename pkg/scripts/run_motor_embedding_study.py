#!/usr/bin/env python3
"""Embedding studies on the heterogeneous (am_noise) class.

Part 1: fine-tune one model per fixed conditioning text, plus the tuned
model, and measure per-repetition FAD spread (box-plot data). Part 2: on the
tuned model, compare single tuned-target selection against multi-target
selection drawing from the class's top-correlation audio embeddings.

Assumes a benchmark workspace (corpora + pretrain checkpoint) already
exists; builds anything missing.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from flab import corpus
from flab.bench import (ensure_corpora, ensure_pretrained, multi_target_study,
                        train_variant_models, variance_study, write_study_csv)
from flab.configio import PRESETS, load_config
from flab.pipeline import Workspace, load_stack, train_finetune_stage
from flab.utils import apply_thread_limits, derive_seed


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", type=Path, default=Path("runs/bench"))
    ap.add_argument("--preset", choices=sorted(PRESETS), default="quick")
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--count", type=int, default=24)
    ap.add_argument("--sel-seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    apply_thread_limits()

    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    ws = Workspace(args.workdir)
    ensure_corpora(cfg, ws)
    pretrain = ensure_pretrained(cfg, ws)
    class_name = corpus.complex_class_name(corpus.finetune_classes())
    variants = corpus.DEFAULT_TEXT_VARIANTS[class_name]

    tuned_path = ws.checkpoints / "study_tuned.flab"
    if not tuned_path.exists():
        train_finetune_stage(cfg, ws, pretrain, tuner_mode="trainable", text_mode="wrapped",
                             seed=derive_seed(cfg.run.seed, "study-tuned"),
                             out_name=tuned_path.name)
    stacks = {"tuned": load_stack(tuned_path)}
    for text, path in train_variant_models(cfg, ws, pretrain, class_name, variants,
                                           seed=cfg.run.seed).items():
        stacks[text] = load_stack(path)

    print(f"variance study on {class_name}: {args.reps} repetitions x {len(stacks)} models")
    spread = variance_study(stacks, ws, class_name, args.reps, args.count, cfg.run.seed)
    rows = []
    for name, fads in spread.items():
        q1, q3 = np.percentile(fads, [25, 75])
        print(f"  {name:>24}: median={np.median(fads):.3f} IQR={q3 - q1:.3f}")
        rows += [{"model": name, "rep": i, "fad": f} for i, f in enumerate(fads)]
    write_study_csv(ws.reports / "variance_study.csv", rows, ["model", "rep", "fad"])

    sel_seeds = [int(s) for s in args.sel_seeds.split(",")]
    results = multi_target_study(stacks["tuned"], ws, class_name, sel_seeds, count=args.count)
    singles = [a for a, _ in results]
    multis = [b for _, b in results]
    print(f"\nselection-target study on {class_name} over {len(sel_seeds)} seeds:")
    print(f"  single tuned target: mean FAD {np.mean(singles):.3f}")
    print(f"  audio-embedding pool: mean FAD {np.mean(multis):.3f}")
    write_study_csv(ws.reports / "multi_target_study.csv",
                    [{"seed": s, "fad_single": a, "fad_multi": b}
                     for s, (a, b) in zip(sel_seeds, results)],
                    ["seed", "fad_single", "fad_multi"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
