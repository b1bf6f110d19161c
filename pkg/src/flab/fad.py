"""Frechet distance between Gaussian fits of two embedding sets.

    F = ||mu_r - mu_t||^2 + tr(Sigma_r + Sigma_t - 2 sqrt(Sigma_r Sigma_t))

The trace term uses the symmetrized product sqrt(A Sigma_t A) with
A = sqrt(Sigma_r), which equals sqrt(Sigma_r Sigma_t) for PSD inputs and
keeps the eigendecompositions real. Eigenvalues below zero (numerical
noise) are clamped to zero; all linear algebra runs in float64.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError


@dataclass
class EmbeddingStats:
    mu: np.ndarray      # (D,)
    sigma: np.ndarray   # (D, D), symmetric
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.n < 2:
            raise InputError("need at least 2 samples for covariance statistics")
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise InputError(f"sigma shape {self.sigma.shape} does not match mu dim {self.mu.size}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise InputError("sigma must be symmetric")


def fit_stats(embeddings) -> EmbeddingStats:
    """Sample mean and 1/(n-1) covariance, symmetrized."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"expected (n, D) embeddings, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InputError("need at least 2 embeddings")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return EmbeddingStats(mu, sigma, x.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    try:
        eigvals, eigvecs = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as e:
        raise NumericalError(
            f"eigendecomposition failed: {e}; matrix norm {np.linalg.norm(matrix):.3e}, "
            f"diag range [{matrix.diagonal().min():.3e}, {matrix.diagonal().max():.3e}]") from e
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(r: EmbeddingStats, t: EmbeddingStats) -> float:
    if r.mu.size != t.mu.size:
        raise InputError(f"dimension mismatch: {r.mu.size} vs {t.mu.size}")
    a = _psd_sqrt(r.sigma)
    inner = a @ t.sigma @ a
    inner = (inner + inner.T) / 2.0
    try:
        eigvals = np.linalg.eigvalsh(inner)
    except np.linalg.LinAlgError as e:
        raise NumericalError(
            f"eigendecomposition of product failed: {e}; "
            f"|Sigma_r|={np.linalg.norm(r.sigma):.3e} |Sigma_t|={np.linalg.norm(t.sigma):.3e}") from e
    trace_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    diff = r.mu - t.mu
    f = float(diff @ diff + np.trace(r.sigma) + np.trace(t.sigma) - 2.0 * trace_sqrt)
    return max(f, 0.0)


@dataclass
class FADReport:
    per_class: dict                    # class -> F
    n_generated: dict                  # class -> count
    n_reference: dict                  # class -> count
    pooled: float
    extractor_id: str = ""
    absent_classes: list = field(default_factory=list)


def fad_report(generated: dict, reference: dict, extractor_id: str = "") -> FADReport:
    """Per-class and pooled distances from class -> (n, D) embedding maps.

    Classes present on only one side are listed as absent, never scored zero.
    """
    shared = [c for c in reference if c in generated]
    absent = sorted(set(generated).symmetric_difference(reference))
    per_class, n_gen, n_ref = {}, {}, {}
    for c in shared:
        g, r = np.asarray(generated[c]), np.asarray(reference[c])
        per_class[c] = frechet_distance(fit_stats(g), fit_stats(r))
        n_gen[c], n_ref[c] = len(g), len(r)
    if not shared:
        raise InputError("no classes shared between generated and reference sets")
    pooled = frechet_distance(
        fit_stats(np.concatenate([generated[c] for c in shared])),
        fit_stats(np.concatenate([reference[c] for c in shared])))
    return FADReport(per_class, n_gen, n_ref, pooled, extractor_id, absent)


def write_fad_csv(report: FADReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "F", "n_generated", "n_reference"])
        for c in sorted(report.per_class):
            w.writerow([c, f"{report.per_class[c]:.10g}", report.n_generated[c], report.n_reference[c]])
        w.writerow(["__pooled__", f"{report.pooled:.10g}",
                    sum(report.n_generated.values()), sum(report.n_reference.values())])
    return path


def write_fad_jsonl(report: FADReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for c in sorted(report.per_class):
            f.write(json.dumps({"class": c, "F": report.per_class[c],
                                "n_generated": report.n_generated[c],
                                "n_reference": report.n_reference[c],
                                "extractor": report.extractor_id}, sort_keys=True) + "\n")
        f.write(json.dumps({"class": "__pooled__", "F": report.pooled,
                            "absent_classes": report.absent_classes,
                            "extractor": report.extractor_id}, sort_keys=True) + "\n")
    return path
