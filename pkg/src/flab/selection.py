"""Score-based output selection.

Candidates are scored by cosine similarity between their audio embedding and
a target embedding. Selection either keeps the top scorers (top1 mode) or
everything above a per-class calibrated threshold (threshold mode, with
optional backfill so the caller still receives the requested count). Targets
can come from the tuned text embedding, a text variant, or a pool of
high-correlation audio embeddings drawn per selection iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .utils import rng_for

MODES = ("top1", "threshold")
TARGET_SOURCES = ("tuned_text", "text_variant", "audio_embedding_pool")


@dataclass
class SelectionPolicy:
    pool_size: int = 8                       # candidates drawn per requested clip
    thresholds: dict = field(default_factory=dict)  # class -> theta
    mode: str = "top1"
    target_source: str = "tuned_text"
    backfill: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pool_size < 1:
            raise InputError("pool_size must be >= 1")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.target_source not in TARGET_SOURCES:
            raise InputError(f"target_source must be one of {TARGET_SOURCES}")
        for c, theta in self.thresholds.items():
            if not -1.0 <= theta <= 1.0:
                raise InputError(f"threshold for {c!r} must lie in [-1, 1], got {theta}")

    def threshold_for(self, class_name: str | None) -> float:
        return self.thresholds.get(class_name, -1.0)


@dataclass
class Candidate:
    clip_id: str
    waveform: object          # Waveform or None when only embeddings matter
    embedding: np.ndarray     # unit-norm audio embedding
    score: float

    def __post_init__(self):
        if not -1.0 - 1e-6 <= self.score <= 1.0 + 1e-6:
            raise InputError(f"cosine score out of range: {self.score}")


@dataclass
class CandidatePool:
    candidates: list

    def __post_init__(self):
        ids = [c.clip_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate clip ids in candidate pool")

    def __len__(self):
        return len(self.candidates)


def _check_unit(target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float32)
    norm = float(np.linalg.norm(target))
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-3:
        raise InputError(f"target embedding must be unit-norm, got |t|={norm:.4f}")
    return target


def score_candidate(waveform, target: np.ndarray, encoder_params, stft_cfg) -> float:
    """Cosine between the clip's audio embedding and a unit target."""
    from .audio import wav_to_mel
    from .clap import encode_audio

    target = _check_unit(target)
    emb = encode_audio(wav_to_mel(waveform, stft_cfg).values, encoder_params)
    return float(np.clip(emb @ target, -1.0, 1.0))


def _ranked(candidates) -> list:
    return sorted(candidates, key=lambda c: (-c.score, c.clip_id))


def select(pool: CandidatePool, policy: SelectionPolicy, want: int,
           class_name: str | None = None) -> list[str]:
    """Pick clip ids from a scored pool.

    top1: the `want` best scores, ties broken by clip_id. threshold: all
    candidates at or above the class threshold; if fewer than `want` pass
    and backfill is on, fill up by descending score.
    """
    if len(pool) == 0:
        raise InputError("empty candidate pool")
    if want < 1:
        raise InputError("want must be >= 1")
    ranked = _ranked(pool.candidates)
    if policy.mode == "top1":
        if len(pool) < want:
            raise InputError(f"pool of {len(pool)} cannot supply {want} clips in top1 mode")
        return [c.clip_id for c in ranked[:want]]
    theta = policy.threshold_for(class_name)
    passing = [c for c in ranked if c.score >= theta]
    selected = [c.clip_id for c in passing]
    if policy.backfill and len(selected) < want:
        rest = [c.clip_id for c in ranked if c.clip_id not in set(selected)]
        selected += rest[:want - len(selected)]
    return selected


def rescore(pool: CandidatePool, target: np.ndarray) -> CandidatePool:
    target = _check_unit(target)
    return CandidatePool([
        Candidate(c.clip_id, c.waveform, c.embedding, float(np.clip(c.embedding @ target, -1.0, 1.0)))
        for c in pool.candidates])


def multi_target_select(pool: CandidatePool, targets: list, policy: SelectionPolicy,
                        want: int, seed: int) -> list[str]:
    """Per iteration, draw one target uniformly and take the best remaining
    candidate under that target."""
    if not targets:
        raise InputError("empty target list")
    if len(pool) == 0:
        raise InputError("empty candidate pool")
    if len(pool) < want:
        raise InputError(f"pool of {len(pool)} cannot supply {want} clips")
    targets = [_check_unit(t) for t in targets]
    rng = rng_for(seed, "multi-target")
    remaining = list(pool.candidates)
    chosen = []
    for _ in range(want):
        target = targets[int(rng.integers(len(targets)))]
        best = min(remaining, key=lambda c: (-float(c.embedding @ target), c.clip_id))
        chosen.append(best.clip_id)
        remaining.remove(best)
    return chosen


def build_audio_target_pool(embeddings: np.ndarray, top_m: int) -> tuple[np.ndarray, list[int]]:
    """Rank same-class clip embeddings by mean cosine to the rest of the
    class and return the top_m with their indices."""
    embs = np.asarray(embeddings, dtype=np.float64)
    n = embs.shape[0]
    if top_m < 1 or top_m > n:
        raise InputError(f"top_m must lie in [1, {n}], got {top_m}")
    sims = embs @ embs.T
    mean_to_others = (sims.sum(axis=1) - sims.diagonal()) / max(n - 1, 1)
    order = sorted(range(n), key=lambda i: (-mean_to_others[i], i))
    idx = order[:top_m]
    return embs[idx].astype(np.float32), idx


def calibrate_class_threshold(scores: np.ndarray, embeddings: np.ndarray,
                              reference_stats, grid, min_select: int = 2):
    """Sweep thresholds over one class's scored candidates.

    For each grid point, the candidates at or above the threshold form the
    selected set and are measured against the class reference; points
    selecting fewer than min_select clips are skipped. Returns the FAD-
    minimizing threshold (ties to the smaller theta) and the sweep table.
    """
    from .fad import fit_stats, frechet_distance

    if len(grid) == 0:
        raise InputError("empty threshold grid")
    scores = np.asarray(scores, dtype=np.float64)
    embeddings = np.asarray(embeddings)
    rows = []
    best = None
    for theta in sorted(grid):
        mask = scores >= theta
        n_sel = int(mask.sum())
        if n_sel < min_select:
            rows.append({"theta": float(theta), "n_selected": n_sel, "fad": None})
            continue
        f = frechet_distance(fit_stats(embeddings[mask]), reference_stats)
        rows.append({"theta": float(theta), "n_selected": n_sel, "fad": f})
        if best is None or f < best[1] - 1e-15:
            best = (float(theta), f)
    if best is None:
        raise InputError("no grid point selected enough clips to evaluate")
    return best[0], rows


def write_calibration_csv(per_class_rows: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "theta", "n_selected", "fad"])
        for class_name in sorted(per_class_rows):
            for row in per_class_rows[class_name]:
                fad = "" if row["fad"] is None else f"{row['fad']:.10g}"
                w.writerow([class_name, f"{row['theta']:.3g}", row["n_selected"], fad])
    return path
