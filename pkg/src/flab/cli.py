"""Command-line entry point.

Subcommands: synth-data, train, generate, evaluate, calibrate, benchmark.
Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
The FLAB_THREADS environment variable caps the worker thread pool.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench, corpus, fad, pipeline
from .configio import PRESETS, RunConfig, load_config, save_config
from .errors import FlabError
from .utils import apply_thread_limits, derive_seed


def _resolve_config(args) -> RunConfig:
    cfg = PRESETS[args.preset]() if args.config is None else load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", type=Path, default=Path("runs/default"),
                   help="workspace directory for corpora, checkpoints, and reports")
    p.add_argument("--config", type=Path, default=None, help="config file (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="synthesize the parametric corpora")
    _add_common(p)

    p = sub.add_parser("train", help="run a training stage")
    _add_common(p)
    p.add_argument("--stage", choices=("pretrain", "finetune"), required=True)
    p.add_argument("--from-scratch", action="store_true",
                   help="finetune only: random generator init instead of the pretrain weights")
    p.add_argument("--tuner", choices=pipeline.TUNER_MODES, default="none")
    p.add_argument("--text-mode", choices=("wrapped", "label"), default=None)
    p.add_argument("--pretrain-ckpt", type=Path, default=None)
    p.add_argument("--out-name", default=None)

    p = sub.add_parser("generate", help="generate clips from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--labels", default=None, help="comma-separated labels; default: all seven")
    p.add_argument("--count", type=int, default=None, help="clips per label")
    p.add_argument("--pool", type=int, default=None, help="candidates per requested clip")
    p.add_argument("--mode", choices=("none", "top1", "threshold"), default="none")
    p.add_argument("--sample-steps", type=int, default=None)
    p.add_argument("--thresholds", type=Path, default=None, help="thresholds file from calibrate")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("evaluate", help="Frechet distance of a generated directory")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True, help="generated manifest (jsonl)")
    p.add_argument("--reference", type=Path, default=None, help="reference manifest; default eval split")
    p.add_argument("--out", type=Path, default=None, help="report CSV path")

    p = sub.add_parser("calibrate", help="per-class threshold calibration")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--count", type=int, default=None, help="pool iterations per class")

    p = sub.add_parser("benchmark", help="run the ablation ladder")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated benchmark seeds")
    return parser


def _cmd_synth_data(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    manifests = pipeline.synth_data(cfg, ws)
    save_config(cfg, ws.root / "config_synth.txt")
    for name, splits in manifests.items():
        for split, m in splits.items():
            print(f"{name}/{split}: {len(m.entries)} clips")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    bench.ensure_corpora(cfg, ws)
    if args.stage == "pretrain":
        path = pipeline.train_pretrain_stage(cfg, ws, out_name=args.out_name or "pretrain.flab")
    else:
        ckpt = args.pretrain_ckpt or (ws.checkpoints / "pretrain.flab")
        path = pipeline.train_finetune_stage(
            cfg, ws, ckpt, from_scratch=args.from_scratch, tuner_mode=args.tuner,
            text_mode=args.text_mode, out_name=args.out_name or "finetune.flab")
    print(f"checkpoint: {path}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    stack = pipeline.load_stack(args.checkpoint)
    if args.sample_steps is not None:
        stack.cfg.schedule.sample_steps = args.sample_steps
    labels = (args.labels.split(",") if args.labels
              else [s.name for s in corpus.finetune_classes()])
    count = args.count if args.count is not None else stack.cfg.generate.n_per_class
    thresholds = bench.load_thresholds(args.thresholds) if args.thresholds else None
    out = args.out or (ws.generated / "cli")
    seed = cfg.run.seed
    result = pipeline.generate(stack, labels, count, seed, out, mode=args.mode,
                               pool_size=args.pool, thresholds=thresholds)
    save_config(stack.cfg, Path(out) / "config_generate.txt")
    print(f"wrote {sum(len(v) for v in result.selected.values())} clips to {result.out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    stack = pipeline.load_stack(args.checkpoint)
    reference = args.reference or ws.manifest("finetune", "eval")
    report = pipeline.evaluate_generated(args.generated, reference, stack)
    out = args.out or (ws.reports / "fad_evaluate.csv")
    fad.write_fad_csv(report, out)
    fad.write_fad_jsonl(report, Path(out).with_suffix(".jsonl"))
    for c in sorted(report.per_class):
        print(f"{c}: {report.per_class[c]:.4f}")
    print(f"pooled: {report.pooled:.4f}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    stack = pipeline.load_stack(args.checkpoint)
    thresholds = bench.calibrate_thresholds(stack, ws, seed=derive_seed(cfg.run.seed, "calibrate"),
                                            n_per_class=args.count)
    for c in sorted(thresholds):
        print(f"{c}: theta = {thresholds[c]:.2f}")
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _resolve_config(args)
    ws = pipeline.Workspace(args.workdir)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = bench.run_benchmark(cfg, ws, seeds)
    for row in report.rows:
        print(f"{row}: pooled FAD {report.pooled_mean(row):.4f}")
    if report.errors:
        for (row, seed), msg in sorted(report.errors.items()):
            print(f"error in {row} seed {seed}: {msg}", file=sys.stderr)
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "calibrate": _cmd_calibrate,
    "benchmark": _cmd_benchmark,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    apply_thread_limits()
    try:
        return _COMMANDS[args.command](args)
    except FlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
