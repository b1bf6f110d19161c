"""Trainable linear layer refining text embeddings before they condition the
generator.

Initialized as the identity map plus a small Gaussian bias, so the first
training steps only nudge the embedding; both the weight matrix and the bias
then update jointly with the generator. The layer's output is used raw as
the generator condition, and L2-normalized only when it serves as a cosine
scoring target.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .corpus import label_to_text
from .errors import InputError
from .utils import rng_for


class TuningLayer(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        self.W = nn.Parameter(torch.eye(embed_dim))
        self.b = nn.Parameter(torch.zeros(embed_dim))

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.embed_dim:
            raise InputError(f"embedding dim {x.shape[-1]} does not match tuner dim {self.embed_dim}")
        return x @ self.W.T + self.b

    def set_trainable(self, trainable: bool) -> "TuningLayer":
        for p in self.parameters():
            p.requires_grad_(trainable)
        return self


def init_tuning(embed_dim: int, noise_std: float, seed: int) -> TuningLayer:
    """Identity weight; bias drawn i.i.d. N(0, noise_std^2) from the seed."""
    if noise_std < 0:
        raise InputError("noise_std must be >= 0")
    layer = TuningLayer(embed_dim)
    if noise_std > 0:
        b = rng_for(seed, "tuner-bias").normal(0.0, noise_std, size=embed_dim)
        with torch.no_grad():
            layer.b.copy_(torch.from_numpy(b.astype(np.float32)))
    return layer


def apply_tuning(embedding: np.ndarray, layer: TuningLayer) -> np.ndarray:
    """W @ E + b, not re-normalized."""
    e = np.asarray(embedding, dtype=np.float32)
    if e.shape[-1] != layer.embed_dim:
        raise InputError(f"embedding dim {e.shape[-1]} does not match tuner dim {layer.embed_dim}")
    with torch.no_grad():
        return layer(torch.from_numpy(e)).numpy().astype(np.float32)


def tuned_target(label: str, encoder_params, layer: TuningLayer,
                 wrap_table: dict | None = None) -> np.ndarray:
    """Unit-norm scoring target for a label: tuner(text embedding), normalized."""
    from .clap import encode_text, tokenize

    text = label_to_text(label, wrap_table)
    tuned = apply_tuning(encode_text(tokenize(text, encoder_params.vocab), encoder_params), layer)
    norm = float(np.linalg.norm(tuned))
    if norm <= 0 or not np.isfinite(norm):
        raise InputError(f"degenerate tuned embedding for label {label!r}")
    return (tuned / norm).astype(np.float32)


def tuner_to_arrays(layer: TuningLayer) -> dict:
    return {"tuner.W": layer.W.detach().numpy(), "tuner.b": layer.b.detach().numpy()}


def tuner_from_arrays(arrays: dict) -> TuningLayer:
    w = np.array(arrays["tuner.W"])
    layer = TuningLayer(w.shape[0])
    with torch.no_grad():
        layer.W.copy_(torch.from_numpy(w))
        layer.b.copy_(torch.from_numpy(np.array(arrays["tuner.b"])))
    return layer
