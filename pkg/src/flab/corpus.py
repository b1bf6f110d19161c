"""Synthetic parametric sound corpus.

Five procedural families cover the spectrum from sparse and distinct to
dense and stationary:

    impulse_train   decaying band-noise pings at a jittered repetition rate
    band_noise      steady noise confined to a Gaussian frequency band
    chirp           repeated frequency sweeps
    tonal_burst     decaying harmonic pings
    am_noise        band noise under multi-rate amplitude modulation (the
                    deliberately heterogeneous "complex" family)

Each clip is a pure function of its class spec and an integer seed, so a
corpus is reproducible from its manifest alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, write_wav
from .errors import ConfigError, InputError
from .utils import derive_seed, rng_for

FAMILIES = ("impulse_train", "band_noise", "chirp", "tonal_burst", "am_noise")

PEAK_NORM = 0.95


@dataclass(frozen=True)
class SoundClassSpec:
    name: str
    family: str
    param_ranges: dict  # param name -> (low, high)
    duration_s: float = 4.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown sound family {self.family!r}; known: {', '.join(FAMILIES)}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if not self.param_ranges:
            raise ConfigError(f"class {self.name!r} has no parameter ranges")
        for k, (lo, hi) in self.param_ranges.items():
            if lo > hi:
                raise ConfigError(f"class {self.name!r} param {k!r}: low {lo} > high {hi}")


def _draw_params(spec: SoundClassSpec, rng: np.random.Generator) -> dict:
    # Sorted order keeps the draw sequence independent of dict insertion order.
    return {k: rng.uniform(*spec.param_ranges[k]) for k in sorted(spec.param_ranges)}


def _gaussian_band_noise(rng, n, sr, center, bandwidth):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    sigma = max(bandwidth / 2.0, 1.0)
    spec *= np.exp(-0.5 * ((freqs - center) / sigma) ** 2)
    return np.fft.irfft(spec, n)


def _one_burst(t, onset, amp, decay_s, attack_s):
    rel = t - onset
    shape = np.exp(-np.maximum(rel, 0.0) / decay_s) * (1.0 - np.exp(-np.maximum(rel, 0.0) / attack_s))
    return amp * np.where(rel >= 0.0, shape, 0.0)


def _burst_envelope(rng, n, sr, rate, decay_s, attack_s=0.002):
    """Sum of attack/decay envelopes at a jittered repetition rate; every
    clip carries at least one event."""
    env = np.zeros(n)
    t = np.arange(n) / sr
    period = 1.0 / max(rate, 1e-3)
    k = 0
    while True:
        onset = (k + 0.5 + 0.25 * rng.uniform(-1.0, 1.0)) * period
        if onset * sr >= n:
            break
        env += _one_burst(t, onset, 0.7 + 0.3 * rng.uniform(), decay_s, attack_s)
        k += 1
    if env.max() <= 0.0:
        env += _one_burst(t, 0.4 * n / sr, 1.0, decay_s, attack_s)
    return env


def _synth_impulse_train(rng, p, n, sr):
    carrier = _gaussian_band_noise(rng, n, sr, p["center"], p["bandwidth"])
    carrier /= max(np.max(np.abs(carrier)), 1e-9)
    return carrier * _burst_envelope(rng, n, sr, p["rate"], p["decay_s"])


def _synth_band_noise(rng, p, n, sr):
    return _gaussian_band_noise(rng, n, sr, p["center"], p["bandwidth"])


def _synth_chirp(rng, p, n, sr):
    out = np.zeros(n)
    period = 1.0 / max(p["rate"], 1e-3)
    sweep_n = int(p["sweep_s"] * sr)

    def add_sweep(onset):
        seg = min(sweep_n, n - onset)
        tau = np.arange(seg) / sr
        frac = tau / p["sweep_s"]
        inst = p["f_start"] + (p["f_end"] - p["f_start"]) * frac
        phase = 2.0 * np.pi * np.cumsum(inst) / sr
        window = np.sin(np.pi * np.minimum(frac, 1.0)) ** 2
        out[onset:onset + seg] += np.sin(phase + rng.uniform(0, 2 * np.pi)) * window

    k = 0
    while True:
        onset = int(((k + 0.15 + 0.1 * rng.uniform()) * period) * sr)
        if onset >= n:
            break
        add_sweep(onset)
        k += 1
    if np.max(np.abs(out)) <= 0.0:
        add_sweep(int(0.2 * n))
    return out


def _synth_tonal_burst(rng, p, n, sr):
    t = np.arange(n) / sr
    f0 = p["f0"]
    n_harm = int(round(p.get("n_harmonics", 3)))
    carrier = np.zeros(n)
    nyq = sr / 2.0
    for h in range(1, max(n_harm, 1) + 1):
        if f0 * h >= nyq:
            break
        carrier += np.sin(2.0 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
    return carrier * _burst_envelope(rng, n, sr, p["rate"], p["decay_s"], attack_s=0.001)


def _synth_am_noise(rng, p, n, sr):
    carrier = _gaussian_band_noise(rng, n, sr, p["center"], p["bandwidth"])
    t = np.arange(n) / sr
    depth = p["mod_depth"]
    env = 1.0 + depth * np.sin(2.0 * np.pi * p["mod_rate"] * t + rng.uniform(0, 2 * np.pi))
    env *= 1.0 + 0.35 * depth * np.sin(2.0 * np.pi * p["mod_rate"] * 2.73 * t + rng.uniform(0, 2 * np.pi))
    return carrier * env


_SYNTH = {
    "impulse_train": _synth_impulse_train,
    "band_noise": _synth_band_noise,
    "chirp": _synth_chirp,
    "tonal_burst": _synth_tonal_burst,
    "am_noise": _synth_am_noise,
}


def synth_clip(spec: SoundClassSpec, seed: int, sample_rate: int = 16000) -> Waveform:
    """Deterministic clip for (spec, seed), peak-normalized to 0.95."""
    if seed < 0:
        raise InputError("seed must be non-negative")
    rng = rng_for(seed, spec.name, spec.family)
    n = round(spec.duration_s * sample_rate)
    params = _draw_params(spec, rng)
    x = _SYNTH[spec.family](rng, params, n, sample_rate)
    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = x * (PEAK_NORM / peak)
    return Waveform(x.astype(np.float32), sample_rate)


# --------------------------------------------------------------------------
# Default class sets: 7 fine-tuning classes and 20 disjoint pretraining ones.

def finetune_classes(duration_s: float = 4.0) -> list[SoundClassSpec]:
    mk = lambda name, family, **pr: SoundClassSpec(name, family, pr, duration_s)
    return [
        mk("DogBark", "impulse_train", rate=(1.5, 4.0), center=(350, 900), bandwidth=(200, 600), decay_s=(0.04, 0.12)),
        mk("Footstep", "impulse_train", rate=(1.2, 2.5), center=(70, 220), bandwidth=(40, 150), decay_s=(0.05, 0.15)),
        mk("GunShot", "impulse_train", rate=(0.4, 1.0), center=(900, 2500), bandwidth=(1500, 4000), decay_s=(0.12, 0.30)),
        mk("Keyboard", "tonal_burst", f0=(1800, 4200), n_harmonics=(2, 4), rate=(5.0, 11.0), decay_s=(0.010, 0.040)),
        mk("Rain", "band_noise", center=(3000, 5200), bandwidth=(2000, 4000)),
        # Deliberately wide ranges: the heterogeneous "complex" class.
        mk("MovingMotorVehicle", "am_noise", mod_rate=(0.6, 11.0), mod_depth=(0.35, 0.95), center=(250, 3800), bandwidth=(300, 3000)),
        mk("SneezeCough", "chirp", f_start=(1200, 2600), f_end=(250, 700), sweep_s=(0.25, 0.60), rate=(0.5, 1.2)),
    ]


def pretrain_classes(duration_s: float = 4.0) -> list[SoundClassSpec]:
    mk = lambda name, family, **pr: SoundClassSpec(name, family, pr, duration_s)
    return [
        mk("Hammer", "impulse_train", rate=(0.8, 2.0), center=(150, 500), bandwidth=(100, 400), decay_s=(0.03, 0.10)),
        mk("Woodpecker", "impulse_train", rate=(6.0, 14.0), center=(1000, 2400), bandwidth=(400, 1200), decay_s=(0.008, 0.025)),
        mk("Basketball", "impulse_train", rate=(0.9, 1.8), center=(60, 160), bandwidth=(30, 90), decay_s=(0.08, 0.20)),
        mk("Fireworks", "impulse_train", rate=(0.3, 0.9), center=(500, 3500), bandwidth=(2000, 5000), decay_s=(0.20, 0.45)),
        mk("Bell", "tonal_burst", f0=(400, 900), n_harmonics=(3, 6), rate=(0.4, 0.9), decay_s=(0.35, 0.90)),
        mk("Doorbell", "tonal_burst", f0=(600, 1400), n_harmonics=(2, 4), rate=(0.8, 1.6), decay_s=(0.15, 0.40)),
        mk("Telephone", "tonal_burst", f0=(900, 1800), n_harmonics=(2, 3), rate=(2.5, 5.0), decay_s=(0.05, 0.15)),
        mk("Glockenspiel", "tonal_burst", f0=(2500, 5200), n_harmonics=(1, 2), rate=(1.0, 3.0), decay_s=(0.10, 0.30)),
        mk("Cricket", "tonal_burst", f0=(3800, 6500), n_harmonics=(1, 2), rate=(8.0, 16.0), decay_s=(0.004, 0.015)),
        mk("Wind", "band_noise", center=(150, 600), bandwidth=(150, 700)),
        mk("Waterfall", "band_noise", center=(1200, 2600), bandwidth=(1200, 3000)),
        mk("Static", "band_noise", center=(5200, 7200), bandwidth=(1500, 3000)),
        mk("Surf", "am_noise", mod_rate=(0.15, 0.6), mod_depth=(0.5, 0.9), center=(400, 1200), bandwidth=(400, 1500)),
        mk("Engine", "am_noise", mod_rate=(15.0, 45.0), mod_depth=(0.4, 0.8), center=(120, 450), bandwidth=(80, 350)),
        mk("Helicopter", "am_noise", mod_rate=(9.0, 18.0), mod_depth=(0.6, 0.95), center=(300, 900), bandwidth=(250, 900)),
        mk("Fan", "am_noise", mod_rate=(1.5, 5.0), mod_depth=(0.1, 0.35), center=(600, 2000), bandwidth=(500, 1800)),
        mk("Siren", "chirp", f_start=(600, 1000), f_end=(1200, 1900), sweep_s=(0.5, 1.1), rate=(0.8, 1.4)),
        mk("Whistle", "chirp", f_start=(2200, 3200), f_end=(2600, 4200), sweep_s=(0.15, 0.40), rate=(1.0, 2.2)),
        mk("Laser", "chirp", f_start=(4500, 7000), f_end=(400, 1200), sweep_s=(0.05, 0.15), rate=(2.0, 5.0)),
        mk("SlideWhistle", "chirp", f_start=(800, 1400), f_end=(2000, 3400), sweep_s=(0.8, 1.6), rate=(0.4, 0.8)),
    ]


# Hand-picked label wrapping table (editable; label_text.tsv mirrors this).
DEFAULT_WRAP_TABLE = {
    "DogBark": "a dog bark",
    "Footstep": "someone walking with footsteps",
    "GunShot": "a gun shot firing",
    "Keyboard": "Someone using keyboard",
    "Rain": "rain falling down",
    "MovingMotorVehicle": "a moving motor vehicle",
    "SneezeCough": "someone sneezing and coughing",
    "Hammer": "a hammer hitting",
    "Woodpecker": "a woodpecker pecking fast",
    "Basketball": "a basketball bouncing",
    "Fireworks": "fireworks exploding far away",
    "Bell": "a large bell ringing",
    "Doorbell": "a doorbell chiming",
    "Telephone": "an old telephone ringing",
    "Glockenspiel": "a glockenspiel note",
    "Cricket": "crickets chirping at night",
    "Wind": "wind blowing steadily",
    "Waterfall": "a waterfall rushing",
    "Static": "radio static hissing",
    "Surf": "ocean surf rolling in",
    "Engine": "an idling engine rumbling",
    "Helicopter": "a helicopter hovering",
    "Fan": "an electric fan humming",
    "Siren": "a siren wailing up and down",
    "Whistle": "a short whistle rising",
    "Laser": "a laser zap effect",
    "SlideWhistle": "a slide whistle gliding up",
}

# Alternative conditioning texts per label, used by the embedding studies.
# "|"-separated entries denote a pool of prompts.
DEFAULT_TEXT_VARIANTS = {
    "MovingMotorVehicle": ["motor", "a moving motor", "sound of motor", "driving|motor|car"],
    "Rain": ["rain", "sound of rain", "heavy rain falling"],
}

# Extra words available to the tokenizer beyond the wrapping table.
ADJUNCT_WORDS = [
    "sound", "of", "noise", "a", "an", "the", "motor", "driving", "car",
    "machine", "running", "heavy", "soft", "loud", "quiet", "moving",
]


def complex_class_name(specs: list[SoundClassSpec]) -> str:
    """The unique am_noise class: the corpus's heterogeneous benchmark class."""
    names = [s.name for s in specs if s.family == "am_noise"]
    if len(names) != 1:
        raise ConfigError(f"expected exactly one am_noise class, found {names}")
    return names[0]


def label_to_text(label: str, table: dict | None = None) -> str:
    table = DEFAULT_WRAP_TABLE if table is None else table
    if label not in table:
        raise InputError(f"no wrapped text for label {label!r}; known labels: {', '.join(sorted(table))}")
    return table[label]


def save_wrap_table(path, table: dict) -> None:
    lines = [f"{label}\t{text}" for label, text in table.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_wrap_table(path) -> dict:
    table = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            label, text = line.split("\t", 1)
        except ValueError:
            raise ConfigError(f"{path}:{line_no}: expected 'label<TAB>text'")
        table[label.strip()] = text.strip()
    return table


# --------------------------------------------------------------------------
# Manifests

@dataclass
class ManifestEntry:
    clip_id: str
    class_name: str
    text: str
    seed: int
    path: str  # relative to the manifest directory


@dataclass
class CorpusManifest:
    split: str
    entries: list[ManifestEntry]
    root: Path

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate clip ids in {self.split} manifest")

    def classes(self) -> list[str]:
        seen = dict.fromkeys(e.class_name for e in self.entries)
        return list(seen)

    def by_class(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.class_name, []).append(e)
        return out

    def wav_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


def save_manifest(manifest: CorpusManifest) -> Path:
    path = manifest.root / f"manifest_{manifest.split}.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(json.dumps({"clip_id": e.clip_id, "class": e.class_name,
                                "text": e.text, "seed": e.seed, "path": e.path},
                               sort_keys=True) + "\n")
    return path


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    split = path.stem.replace("manifest_", "")
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        entries.append(ManifestEntry(d["clip_id"], d["class"], d["text"], d["seed"], d["path"]))
    return CorpusManifest(split, entries, path.parent)


def build_corpus(specs: list[SoundClassSpec], n_per_class: int, split_ratio: float,
                 root_seed: int, out_dir, *, n_eval_per_class: int = 0,
                 primary_split: str = "train", wrap_table: dict | None = None,
                 sample_rate: int = 16000) -> dict[str, CorpusManifest]:
    """Synthesize a corpus and persist WAVs plus one manifest per split.

    Each class contributes floor(split_ratio * n_per_class) clips to the
    primary split and the remainder to "val"; eval clips, when requested,
    come from an independent seed stream.
    """
    if n_per_class < 2:
        raise ConfigError("n_per_class must be >= 2")
    if not (0 < split_ratio < 1):
        raise ConfigError("split_ratio must lie strictly between 0 and 1")
    if primary_split not in ("train", "pretrain"):
        raise ConfigError(f"primary_split must be 'train' or 'pretrain', got {primary_split!r}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("class names must be unique within a corpus")

    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create corpus directory {out_dir}: {e}") from e

    wrap_table = DEFAULT_WRAP_TABLE if wrap_table is None else wrap_table
    n_primary = int(np.floor(split_ratio * n_per_class))
    splits: dict[str, list[ManifestEntry]] = {primary_split: [], "val": []}
    if n_eval_per_class:
        splits["eval"] = []

    for spec in specs:
        text = label_to_text(spec.name, wrap_table)
        order = rng_for(root_seed, spec.name, "split").permutation(n_per_class)
        assignment = {int(i): (primary_split if rank < n_primary else "val")
                      for rank, i in enumerate(order)}
        for i in range(n_per_class):
            seed = derive_seed(root_seed, spec.name, "clip", i)
            clip_id = f"{spec.name}_{i:04d}"
            rel = f"wav/{clip_id}.wav"
            write_wav(out_dir / rel, synth_clip(spec, seed, sample_rate))
            splits[assignment[i]].append(ManifestEntry(clip_id, spec.name, text, seed, rel))
        for i in range(n_eval_per_class):
            seed = derive_seed(root_seed, spec.name, "eval", i)
            clip_id = f"{spec.name}_eval_{i:04d}"
            rel = f"wav/{clip_id}.wav"
            write_wav(out_dir / rel, synth_clip(spec, seed, sample_rate))
            splits["eval"].append(ManifestEntry(clip_id, spec.name, text, seed, rel))

    manifests = {name: CorpusManifest(name, entries, out_dir) for name, entries in splits.items()}
    for m in manifests.values():
        save_manifest(m)
    save_wrap_table(out_dir / "label_text.tsv", {s.name: label_to_text(s.name, wrap_table) for s in specs})
    return manifests
