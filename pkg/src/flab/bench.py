"""Ablation benchmark and embedding studies.

The benchmark ladder mirrors the staged improvements of the system: a
from-scratch generator conditioned on bare labels, then pretraining, then
wrapped-text conditioning, then score-based selection, then the trainable
embedding tuner. Per seed, every row is trained, sampled, and measured
against the held-out evaluation split; reports carry one row per
(configuration, seed) plus seed-averaged summaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, fad, pipeline, selection
from .configio import RunConfig, save_config
from .errors import ConfigError
from .utils import derive_seed

ROWS = ("scratch", "pretrained", "pretrained_text",
        "pretrained_text_filter", "pretrained_text_filter_tuned")

# Row -> (from_scratch, text_mode, tuner_mode, selection)
ROW_SPECS = {
    "scratch": (True, "label", "none", False),
    "pretrained": (False, "label", "none", False),
    "pretrained_text": (False, "wrapped", "none", False),
    "pretrained_text_filter": (False, "wrapped", "none", True),
    "pretrained_text_filter_tuned": (False, "wrapped", "trainable", True),
}


@dataclass
class BenchmarkReport:
    rows: list
    classes: list
    seeds: list
    cells: dict                  # (row, seed) -> FADReport
    errors: dict = field(default_factory=dict)  # (row, seed) -> message

    def per_class_mean(self, row: str) -> dict:
        values: dict = {}
        for c in self.classes:
            per_seed = [self.cells[(row, s)].per_class[c] for s in self.seeds
                        if (row, s) in self.cells and c in self.cells[(row, s)].per_class]
            if per_seed:
                values[c] = float(np.mean(per_seed))
        return values

    def pooled_mean(self, row: str) -> float:
        vals = [self.cells[(row, s)].pooled for s in self.seeds if (row, s) in self.cells]
        return float(np.mean(vals)) if vals else float("nan")


def ensure_corpora(cfg: RunConfig, ws: pipeline.Workspace) -> None:
    if not ws.manifest("finetune", "train").exists() or not ws.manifest("pretrain", "pretrain").exists():
        pipeline.synth_data(cfg, ws)


def ensure_pretrained(cfg: RunConfig, ws: pipeline.Workspace, reuse: bool = True) -> Path:
    path = ws.checkpoints / "pretrain.flab"
    if reuse and path.exists():
        return path
    return pipeline.train_pretrain_stage(cfg, ws)


def _finetune_for_row(cfg: RunConfig, ws: pipeline.Workspace, pretrain_ckpt: Path,
                      row: str, seed: int, reuse: bool = True) -> Path:
    from_scratch, text_mode, tuner_mode, _ = ROW_SPECS[row]
    # Selection-only rows reuse the same trained model as their base row.
    base = {"pretrained_text_filter": "pretrained_text"}.get(row, row)
    name = f"ft_{base}_s{seed}.flab"
    path = ws.checkpoints / name
    if reuse and path.exists():
        return path
    # One training stream per benchmark seed, shared by every row: rows then
    # differ only in init, conditioning, and the tuner, which keeps the
    # row-to-row comparison paired rather than noise-dominated.
    return pipeline.train_finetune_stage(
        cfg, ws, pretrain_ckpt, from_scratch=from_scratch, tuner_mode=tuner_mode,
        text_mode=text_mode, seed=derive_seed(cfg.run.seed, "bench-ft", seed),
        out_name=name)


def run_benchmark(cfg: RunConfig, ws: pipeline.Workspace, seeds: list[int],
                  rows=ROWS, reuse: bool = True) -> BenchmarkReport:
    if len(seeds) < 1:
        raise ConfigError("benchmark needs at least one seed")
    ensure_corpora(cfg, ws)
    pretrain_ckpt = ensure_pretrained(cfg, ws, reuse=reuse)
    eval_manifest = corpus.load_manifest(ws.manifest("finetune", "eval"))
    labels = [s.name for s in corpus.finetune_classes()]

    report = BenchmarkReport(list(rows), sorted(labels), list(seeds), {})
    for seed in seeds:
        for row in rows:
            try:
                ckpt = _finetune_for_row(cfg, ws, pretrain_ckpt, row, seed, reuse=reuse)
                stack = pipeline.load_stack(ckpt)
                _, _, _, selection = ROW_SPECS[row]
                gen_dir = ws.generated / f"bench_{row}_s{seed}"
                # Shared per-seed generation stream: every row consumes the
                # same latent-noise and phase draws.
                result = pipeline.generate(
                    stack, labels, cfg.generate.n_per_class,
                    derive_seed(cfg.run.seed, "bench-gen", seed), gen_dir,
                    mode="top1" if selection else "none",
                    pool_size=cfg.generate.pool_size)
                fr = pipeline.evaluate_generated(result.manifest, eval_manifest, stack)
                report.cells[(row, seed)] = fr
                fad.write_fad_csv(fr, ws.reports / f"fad_{row}_s{seed}.csv")
            except Exception as e:  # partial failures recorded, run continues
                report.errors[(row, seed)] = f"{type(e).__name__}: {e}"
    write_benchmark_reports(report, ws.reports)
    save_config(cfg, ws.reports / "config_benchmark.txt")
    return report


def write_benchmark_reports(report: BenchmarkReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = out_dir / "benchmark.csv"
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["system"] + report.classes + ["pooled"])
        for row in report.rows:
            means = report.per_class_mean(row)
            w.writerow([row] + [f"{means[c]:.10g}" if c in means else "" for c in report.classes]
                       + [f"{report.pooled_mean(row):.10g}"])
    per_seed = out_dir / "benchmark_seeds.csv"
    with open(per_seed, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["system", "seed"] + report.classes + ["pooled"])
        for row in report.rows:
            for seed in report.seeds:
                cell = report.cells.get((row, seed))
                if cell is None:
                    w.writerow([row, seed] + [""] * len(report.classes) + [""])
                else:
                    w.writerow([row, seed]
                               + [f"{cell.per_class.get(c, float('nan')):.10g}" for c in report.classes]
                               + [f"{cell.pooled:.10g}"])
    if report.errors:
        with open(out_dir / "benchmark_errors.txt", "w") as f:
            for (row, seed), msg in sorted(report.errors.items()):
                f.write(f"{row}\tseed={seed}\t{msg}\n")
    return summary, per_seed


# --------------------------------------------------------------------------
# Threshold calibration

def calibrate_thresholds(stack: pipeline.Stack, ws: pipeline.Workspace, *,
                         seed: int, n_per_class: int | None = None,
                         grid: list | None = None) -> dict:
    """Per class: over-generate, sweep the score threshold, keep the
    FAD-minimizing value measured against the validation reference."""
    cfg = stack.cfg
    grid = list(cfg.generate.threshold_grid) if grid is None else list(grid)
    if not grid:
        raise ConfigError("empty calibration grid")
    n = cfg.generate.n_per_class if n_per_class is None else n_per_class
    k = cfg.generate.pool_size
    val_manifest = corpus.load_manifest(ws.manifest("finetune", "val"))
    val_embs, val_classes = pipeline.manifest_embeddings(val_manifest, stack)
    by_class = pipeline.group_by_class(val_embs, val_classes)

    thresholds, rows_per_class = {}, {}
    for label in sorted(by_class):
        batch = pipeline.synth_candidates(stack, label, n * k,
                                          derive_seed(seed, "calibrate", label), tag="cal")
        target = stack.scoring_target(label)
        scores = np.clip(batch.embeddings @ target, -1.0, 1.0)
        ref_stats = fad.fit_stats(by_class[label])
        theta, rows = selection.calibrate_class_threshold(scores, batch.embeddings, ref_stats, grid)
        thresholds[label] = theta
        rows_per_class[label] = rows
    selection.write_calibration_csv(rows_per_class, ws.reports / "calibration.csv")
    _write_thresholds(ws.reports / "thresholds.txt", thresholds)
    return thresholds


def _write_thresholds(path: Path, thresholds: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["[thresholds]"] + [f"{c} = {thresholds[c]!r}" for c in sorted(thresholds)] + [""]
    path.write_text("\n".join(lines), encoding="utf-8")


def load_thresholds(path) -> dict:
    from .configio import parse_sections

    sections = parse_sections(Path(path).read_text(encoding="utf-8"))
    return {k: float(v) for k, v in sections.get("thresholds", {}).items()}


# --------------------------------------------------------------------------
# Embedding studies on the heterogeneous class

def audio_target_pool_for(stack: pipeline.Stack, manifest, class_name: str,
                          top_m: int) -> np.ndarray:
    """Top-correlation audio-embedding targets for one class of a manifest."""
    if isinstance(manifest, (str, Path)):
        manifest = corpus.load_manifest(manifest)
    embs, classes = pipeline.manifest_embeddings(manifest, stack)
    class_embs = pipeline.group_by_class(embs, classes).get(class_name)
    if class_embs is None:
        raise ConfigError(f"class {class_name!r} not present in manifest")
    pool, _ = selection.build_audio_target_pool(class_embs, top_m)
    return pool


def multi_target_study(stack: pipeline.Stack, ws: pipeline.Workspace, class_name: str,
                       sel_seeds: list[int], *, count: int | None = None,
                       top_m: int | None = None) -> list[tuple[float, float]]:
    """Tuned-text-target vs audio-embedding-pool selection on one class.

    Each seed generates one shared candidate pool and selects twice: once
    with the single tuned target, once drawing targets from the class's
    top-correlation training embeddings. Returns (fad_single, fad_multi)
    per seed, both against the evaluation reference.
    """
    cfg = stack.cfg
    count = cfg.generate.n_per_class if count is None else count
    k = cfg.generate.pool_size
    top_m = cfg.generate.audio_pool_top_m if top_m is None else top_m
    pool_targets = audio_target_pool_for(stack, ws.manifest("finetune", "train"),
                                         class_name, top_m)

    eval_manifest = corpus.load_manifest(ws.manifest("finetune", "eval"))
    ev_embs, ev_classes = pipeline.manifest_embeddings(eval_manifest, stack)
    ref_stats = fad.fit_stats(pipeline.group_by_class(ev_embs, ev_classes)[class_name])

    target = stack.scoring_target(class_name)
    policy = selection.SelectionPolicy(pool_size=k, mode="top1")
    results = []
    for seed in sel_seeds:
        batch = pipeline.synth_candidates(stack, class_name, count * k,
                                          derive_seed(seed, "study", class_name), tag="study")
        cands = [selection.Candidate(cid, None, e, float(np.clip(e @ target, -1.0, 1.0)))
                 for cid, e in zip(batch.clip_ids, batch.embeddings)]
        pool = selection.CandidatePool(cands)
        ids_single = selection.select(pool, policy, count, class_name)
        ids_multi = selection.multi_target_select(pool, list(pool_targets), policy, count,
                                               derive_seed(seed, "study-multi", class_name))
        emb_by_id = dict(zip(batch.clip_ids, batch.embeddings))
        f_single = fad.frechet_distance(fad.fit_stats([emb_by_id[i] for i in ids_single]), ref_stats)
        f_multi = fad.frechet_distance(fad.fit_stats([emb_by_id[i] for i in ids_multi]), ref_stats)
        results.append((f_single, f_multi))
    return results


def train_variant_models(cfg: RunConfig, ws: pipeline.Workspace, pretrain_ckpt,
                         class_name: str, variants: list[str], seed: int) -> dict:
    """Fine-tune one model per fixed conditioning text for class_name."""
    out = {}
    for i, text in enumerate(variants):
        name = f"variant_{i}.flab"
        path = ws.checkpoints / name
        if not path.exists():
            pipeline.train_finetune_stage(
                cfg, ws, pretrain_ckpt, tuner_mode="none", text_mode="wrapped",
                variant_texts={class_name: text.replace("|", " ")},
                seed=derive_seed(seed, "variant", i), out_name=name)
        out[text] = path
    return out


def variance_study(stacks: dict, ws: pipeline.Workspace, class_name: str,
                   n_reps: int, count: int, base_seed: int) -> dict:
    """Per-repetition FAD of each model on one class, no selection.

    All models share the same per-repetition noise seeds, so differences
    reflect the conditioning embedding rather than the draw.
    """
    any_stack = next(iter(stacks.values()))
    eval_manifest = corpus.load_manifest(ws.manifest("finetune", "eval"))
    ev_embs, ev_classes = pipeline.manifest_embeddings(eval_manifest, any_stack)
    ref_stats = fad.fit_stats(pipeline.group_by_class(ev_embs, ev_classes)[class_name])

    out = {name: [] for name in stacks}
    for rep in range(n_reps):
        rep_seed = derive_seed(base_seed, "variance-rep", rep)
        for name, stack in stacks.items():
            batch = pipeline.synth_candidates(stack, class_name, count, rep_seed, tag="var")
            f = fad.frechet_distance(fad.fit_stats(batch.embeddings), ref_stats)
            out[name].append(f)
    return out


def write_study_csv(path, rows: list[dict], fieldnames: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
