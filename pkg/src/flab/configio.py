"""Run configuration: flat key-value sections, presets, and (de)serialization.

The on-disk format is a minimal TOML-like text file: ``[section]`` headers
over ``key = value`` lines, where values are ints, floats, booleans,
strings, or flat lists. Every run copies its resolved configuration next to
its outputs; the config hash recorded in checkpoints is the SHA-256 of that
canonical text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .audio import StftConfig
from .errors import ConfigError


@dataclass
class FrontendSection:
    sample_rate: int = 16000
    window_len: int = 1024
    hop: int = 160
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    duration_s: float = 4.0
    mel_frames: int = 400  # canonical padded frame count entering the VAE

    def stft(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop, self.n_mels, self.sample_rate,
                          self.fmin, self.fmax, self.log_floor)


@dataclass
class CorpusSection:
    finetune_per_class: int = 100
    pretrain_per_class: int = 200
    eval_per_class: int = 100
    split_ratio: float = 0.9


@dataclass
class ModelSection:
    embed_dim: int = 64
    latent_channels: int = 4
    unet_width: int = 16
    ctx_dim: int = 96
    vae_width: int = 32
    clap_text_width: int = 64
    clap_audio_width: int = 16


@dataclass
class ScheduleSection:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    sample_steps: int = 200


@dataclass
class TrainSection:
    lr: float = 1e-3
    ldm_finetune_lr: float = 3e-4
    clap_steps: int = 1200
    clap_batch: int = 32
    vae_steps: int = 1200
    vae_batch: int = 16
    kl_weight: float = 1e-4
    ldm_pretrain_steps: int = 2500
    ldm_finetune_steps: int = 900
    ldm_batch: int = 32
    cond_dropout: float = 0.0
    tuner_noise_std: float = 0.01
    # The tuning layer learns faster than the generator so it can close the
    # text-to-audio embedding gap before the generator re-adapts to raw text
    # conditions.
    tuner_lr_scale: float = 10.0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    val_fad_every: int = 0        # 0 disables periodic validation FAD
    val_fad_clips: int = 4        # clips per class per validation probe


@dataclass
class GenerateSection:
    n_per_class: int = 100
    pool_size: int = 8
    mode: str = "none"
    griffinlim_iters: int = 32
    target_source: str = "tuned_text"
    audio_pool_top_m: int = 8
    threshold_grid: list = field(default_factory=lambda: [-1.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


@dataclass
class RunSection:
    seed: int = 0
    stage: str = "pretrain"
    text_mode: str = "wrapped"   # "wrapped" | "label"
    preset: str = "desk"


@dataclass
class RunConfig:
    frontend: FrontendSection = field(default_factory=FrontendSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    run: RunSection = field(default_factory=RunSection)

    def latent_shape(self) -> tuple:
        cl = 4  # compression level is fixed at 4 in all presets
        return (self.model.latent_channels, self.frontend.n_mels // cl, self.frontend.mel_frames // cl)


def desk_scale() -> RunConfig:
    """Default configuration: runnable end to end on a single CPU."""
    return RunConfig()


def quick() -> RunConfig:
    """Reduced configuration for the acceptance benchmark and smoke runs:
    2-second clips, 32-dim embeddings, smaller corpora and step budgets."""
    cfg = RunConfig()
    cfg.run.preset = "quick"
    cfg.frontend = FrontendSection(duration_s=2.0, mel_frames=196)
    cfg.corpus = CorpusSection(finetune_per_class=48, pretrain_per_class=40,
                               eval_per_class=72, split_ratio=0.9)
    cfg.model.embed_dim = 32
    cfg.train.clap_steps = 700
    cfg.train.vae_steps = 500
    cfg.train.ldm_pretrain_steps = 1200
    cfg.train.ldm_finetune_steps = 240
    cfg.schedule.sample_steps = 32
    cfg.generate.n_per_class = 36
    cfg.generate.pool_size = 4
    cfg.generate.griffinlim_iters = 16
    return cfg


def full_scale() -> RunConfig:
    """Larger 22.05 kHz configuration (512-dim embeddings, 80 mel bins);
    a reference preset, not sized for a desk CPU."""
    cfg = RunConfig()
    cfg.run.preset = "full"
    cfg.frontend = FrontendSection(sample_rate=22050, window_len=1024, hop=256,
                                   n_mels=80, fmin=0.0, fmax=11025.0,
                                   duration_s=4.0, mel_frames=344)
    cfg.model.embed_dim = 512
    cfg.train.lr = 3.0e-5
    return cfg


PRESETS = {"desk": desk_scale, "quick": quick, "full": full_scale}


# --------------------------------------------------------------------------
# Text round trip

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [] if not inner else [_parse_value(p) for p in inner.split(",")]
    if text in ("true", "false"):
        return text == "true"
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        lines.append(f"[{section_field.name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse_sections(text: str) -> dict:
    sections: dict = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {line_no}: key outside any [section]")
        key, value = line.split("=", 1)
        sections[current][key.strip()] = _parse_value(value)
    return sections


def config_from_text(text: str) -> RunConfig:
    sections = parse_sections(text)
    cfg = RunConfig()
    for section_field in fields(cfg):
        data = sections.pop(section_field.name, {})
        section = getattr(cfg, section_field.name)
        known = {f.name for f in fields(section)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section_field.name}]")
            setattr(section, key, value)
    if sections:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(sections))}")
    return cfg


def load_config(path) -> RunConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(cfg), encoding="utf-8")
    return path


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]
