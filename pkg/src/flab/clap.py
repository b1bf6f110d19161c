"""Contrastive text/audio encoder pair sharing one embedding space.

The audio branch is a strided conv stack over log-mel inputs with global
mean pooling; the text branch is a word-embedding table with masked mean
pooling and a two-layer head. Both emit L2-normalized vectors of the same
dimension, trained with a symmetric InfoNCE objective over the batch
cosine-similarity matrix at a learnable temperature.

The trained audio branch doubles as the feature extractor for the Frechet
distance evaluation.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import normalize_log_mel
from .errors import ConfigError, InputError
from .utils import derive_seed, rng_for

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ConfigError("vocabulary must start with <pad>, <unk>")

    def __len__(self):
        return len(self.tokens)

    @property
    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.tokens)}


def words_of(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocabulary(texts, extra_words=()) -> Vocabulary:
    seen = set()
    for t in list(texts) + list(extra_words):
        seen.update(words_of(t))
    return Vocabulary((PAD_TOKEN, UNK_TOKEN) + tuple(sorted(seen)))


def save_vocabulary(path, vocab: Vocabulary) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocabulary(path) -> Vocabulary:
    return Vocabulary(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


@dataclass
class TextPrompt:
    raw: str
    tokens: list[int]


def tokenize(text: str, vocab: Vocabulary) -> TextPrompt:
    index = vocab.index
    ids = [index.get(w, 1) for w in words_of(text)]
    return TextPrompt(text, ids)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, width: int = 64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, width, padding_idx=0)
        self.head = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, embed_dim))

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        # token_ids: (B, T) padded with 0
        mask = (token_ids != 0).float().unsqueeze(-1)
        emb = self.embed(token_ids) * mask
        pooled = emb.sum(dim=1) / mask.sum(dim=1).clamp_min(1.0)
        return self.head(pooled)


class AudioEncoder(nn.Module):
    def __init__(self, n_mels: int, embed_dim: int, width: int = 16):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 4 * width]
        layers, c_in = [], 1
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                       nn.GroupNorm(min(8, c), c), nn.SiLU()]
            c_in = c
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(chans[-1], embed_dim)
        self.n_mels = n_mels

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (B, n_mels, T) raw log-mel values
        if mel.shape[1] != self.n_mels:
            raise InputError(f"encoder expects {self.n_mels} mel bins, got {mel.shape[1]}")
        h = self.convs(normalize_log_mel(mel).unsqueeze(1))
        return self.proj(h.mean(dim=(2, 3)))


@dataclass
class EncoderParams:
    text: TextEncoder
    audio: AudioEncoder
    log_temperature: torch.Tensor
    embed_dim: int
    vocab: Vocabulary

    @property
    def temperature(self) -> float:
        return float(torch.exp(self.log_temperature))


def init_encoder(vocab: Vocabulary, n_mels: int, embed_dim: int, seed: int,
                 init_temperature: float = 0.07, text_width: int = 64,
                 audio_width: int = 16) -> EncoderParams:
    if init_temperature <= 0:
        raise ConfigError("temperature must be positive")
    torch.manual_seed(derive_seed(seed, "clap-init"))
    text = TextEncoder(len(vocab), embed_dim, text_width)
    audio = AudioEncoder(n_mels, embed_dim, audio_width)
    log_t = torch.tensor(float(np.log(init_temperature)), requires_grad=True)
    return EncoderParams(text, audio, log_t, embed_dim, vocab)


def pad_token_batch(prompts: list[TextPrompt]) -> torch.Tensor:
    if any(len(p.tokens) == 0 for p in prompts):
        raise InputError("empty token sequence")
    t_max = max(len(p.tokens) for p in prompts)
    out = torch.zeros((len(prompts), t_max), dtype=torch.long)
    for i, p in enumerate(prompts):
        out[i, :len(p.tokens)] = torch.tensor(p.tokens, dtype=torch.long)
    return out


def _l2norm(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


@torch.no_grad()
def encode_text_batch(prompts: list[TextPrompt], params: EncoderParams) -> np.ndarray:
    params.text.eval()
    emb = _l2norm(params.text(pad_token_batch(prompts)))
    return emb.numpy().astype(np.float32)


def encode_text(prompt: TextPrompt, params: EncoderParams) -> np.ndarray:
    """L2-normalized text embedding, deterministic for (prompt, params)."""
    return encode_text_batch([prompt], params)[0]


@torch.no_grad()
def encode_audio_batch(mels: np.ndarray, params: EncoderParams, chunk: int = 256) -> np.ndarray:
    """(B, n_mels, T) log-mel values -> (B, D_e) unit vectors."""
    params.audio.eval()
    mels = np.asarray(mels, dtype=np.float32)
    if mels.ndim != 3:
        raise InputError(f"expected (B, n_mels, T) mel batch, got shape {mels.shape}")
    outs = []
    for i in range(0, len(mels), chunk):
        emb = params.audio(torch.from_numpy(mels[i:i + chunk]))
        outs.append(_l2norm(emb).numpy())
    return np.concatenate(outs).astype(np.float32)


def encode_audio(mel, params: EncoderParams) -> np.ndarray:
    """Accepts a MelSpectrogram or a raw (n_mels, T) value array."""
    values = mel.values if hasattr(mel, "values") else mel
    return encode_audio_batch(np.asarray(values)[None, ...], params)[0]


def symmetric_infonce(a_emb: torch.Tensor, t_emb: torch.Tensor, log_temperature: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the scaled cosine matrix, averaged over both directions."""
    logits = (_l2norm(a_emb) @ _l2norm(t_emb).T) / torch.exp(log_temperature)
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class ClapTrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    embed_dim: int = 64
    init_temperature: float = 0.07
    text_width: int = 64
    audio_width: int = 16
    val_fraction: float = 0.1


def train_contrastive(pairs: list, cfg: ClapTrainConfig, vocab: Vocabulary,
                      labels: list[str] | None = None) -> tuple[EncoderParams, dict]:
    """Train both encoders on (mel values, TextPrompt) pairs.

    Returns the trained params and a history dict with train losses and
    held-out losses at init and at the end.
    """
    if len(pairs) < 2:
        raise InputError("need at least 2 pairs")
    mels = np.stack([np.asarray(m, dtype=np.float32) for m, _ in pairs])
    prompts = [p for _, p in pairs]
    n_mels = mels.shape[1]
    if labels is not None and len(set(labels)) < 2:
        raise InputError("need at least 2 distinct classes")

    params = init_encoder(vocab, n_mels, cfg.embed_dim, cfg.seed,
                          cfg.init_temperature, cfg.text_width, cfg.audio_width)
    modules = nn.ModuleList([params.text, params.audio])
    opt = torch.optim.Adam(list(modules.parameters()) + [params.log_temperature], lr=cfg.lr)

    n = len(pairs)
    order = rng_for(cfg.seed, "clap-split").permutation(n)
    n_val = max(2, round(cfg.val_fraction * n)) if cfg.val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) < 2:
        raise InputError("too few pairs after validation split")

    def held_out_loss() -> float:
        if n_val == 0:
            return float("nan")
        with torch.no_grad():
            a = params.audio(torch.from_numpy(mels[val_idx]))
            t = params.text(pad_token_batch([prompts[i] for i in val_idx]))
            return float(symmetric_infonce(a, t, params.log_temperature))

    history = {"train_loss": [], "val_loss_init": held_out_loss()}
    batch = min(cfg.batch_size, len(train_idx))
    for step in range(cfg.steps):
        rng = rng_for(cfg.seed, "clap-batch", step)
        idx = rng.choice(train_idx, size=batch, replace=False)
        if labels is not None and batch > 1:
            tries = 0
            while len({labels[i] for i in idx}) == 1 and tries < 10:
                warnings.warn("single-class contrastive batch; reshuffling")
                idx = rng.choice(train_idx, size=batch, replace=False)
                tries += 1
        a = params.audio(torch.from_numpy(mels[idx]))
        t = params.text(pad_token_batch([prompts[i] for i in idx]))
        loss = symmetric_infonce(a, t, params.log_temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["train_loss"].append(float(loss.detach()))
    history["val_loss_final"] = held_out_loss()
    params.text.eval()
    params.audio.eval()
    return params, history


# --------------------------------------------------------------------------
# Retrieval-style evaluation helpers

def text_to_audio_top1(text_embs: np.ndarray, text_classes: list[str],
                       audio_embs: np.ndarray, audio_classes: list[str]) -> float:
    """Fraction of class texts whose nearest audio clip belongs to that class."""
    sims = np.asarray(text_embs) @ np.asarray(audio_embs).T
    hits = [audio_classes[int(np.argmax(row))] == c for row, c in zip(sims, text_classes)]
    return float(np.mean(hits))


def audio_to_text_top1(audio_embs: np.ndarray, audio_classes: list[str],
                       text_embs: np.ndarray, text_classes: list[str]) -> float:
    """Fraction of clips whose nearest class text is their own class."""
    sims = np.asarray(audio_embs) @ np.asarray(text_embs).T
    hits = [text_classes[int(np.argmax(row))] == c for row, c in zip(sims, audio_classes)]
    return float(np.mean(hits))


def matched_margin_rate(audio_embs: np.ndarray, audio_classes: list[str],
                        text_embs: np.ndarray, text_classes: list[str]) -> float:
    """Share of (clip, wrong-class) pairs where the matched text scores higher."""
    sims = np.asarray(audio_embs) @ np.asarray(text_embs).T
    col = {c: j for j, c in enumerate(text_classes)}
    wins = total = 0
    for i, c in enumerate(audio_classes):
        own = sims[i, col[c]]
        for j, other in enumerate(text_classes):
            if other != c:
                wins += bool(own > sims[i, j])
                total += 1
    return wins / max(total, 1)


# --------------------------------------------------------------------------
# Checkpoint plumbing

def encoder_to_arrays(params: EncoderParams, prefix: str = "clap") -> dict:
    out = {}
    for branch, module in (("text", params.text), ("audio", params.audio)):
        for name, p in module.state_dict().items():
            out[f"{prefix}.{branch}.{name}"] = p.detach().numpy()
    out[f"{prefix}.log_temperature"] = params.log_temperature.detach().numpy().reshape(1)
    return out


def encoder_from_arrays(arrays: dict, vocab: Vocabulary, n_mels: int, embed_dim: int,
                        text_width: int, audio_width: int, prefix: str = "clap") -> EncoderParams:
    params = init_encoder(vocab, n_mels, embed_dim, seed=0,
                          text_width=text_width, audio_width=audio_width)
    for branch, module in (("text", params.text), ("audio", params.audio)):
        state = {}
        key_prefix = f"{prefix}.{branch}."
        for key, arr in arrays.items():
            if key.startswith(key_prefix):
                state[key[len(key_prefix):]] = torch.from_numpy(np.array(arr))
        module.load_state_dict(state)
    params.log_temperature = torch.tensor(float(arrays[f"{prefix}.log_temperature"][0]))
    params.text.eval()
    params.audio.eval()
    return params
