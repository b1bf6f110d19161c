"""Audio frontend: waveforms, STFT magnitudes, log-mel spectrograms, WAV I/O.

Conventions, fixed across the whole package:

- STFT frames start at sample 0 with no centre padding, so a signal of
  length L yields ``1 + (L - window_len) // hop`` frames.
- Periodic Hann analysis window.
- Mel values are natural-log magnitudes floored at ``log_floor`` before the
  log, i.e. ``log(max(mel_mag, log_floor))``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

# Affine squash applied to log-mel values before they enter any network.
LOGMEL_NORM_OFFSET = -6.0
LOGMEL_NORM_SCALE = 3.0


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 160
    n_mels: int = 64
    sample_rate: int = 16000
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len):
            raise ConfigError(f"need 0 < hop <= window_len, got hop={self.hop} window_len={self.window_len}")
        if not (self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(f"need fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={self.fmax}")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")
        if self.samples.size and float(np.max(np.abs(self.samples))) > 1.0 + 1e-6:
            raise InputError("waveform samples must lie in [-1, 1]")


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != self.config.n_mels:
            raise InputError(f"mel values must have shape (n_mels, frames), got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def n_frames(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.window_len:
        raise InputError(f"signal of {n_samples} samples is shorter than one window ({cfg.window_len})")
    return 1 + (n_samples - cfg.window_len) // cfg.hop


def hann_window(n: int) -> np.ndarray:
    # Periodic variant: matches the overlap-add identity used by the vocoder.
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def frame_signal(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., L) -> (..., T, window_len) frame matrix, copied."""
    samples = np.asarray(samples)
    t = n_frames(samples.shape[-1], cfg)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(t)[:, None]
    return samples[..., idx]


def stft_magnitude(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Magnitude STFT. (L,) -> (n_bins, T); (B, L) -> (B, n_bins, T)."""
    samples = np.asarray(samples, dtype=np.float64)
    squeeze = samples.ndim == 1
    if squeeze:
        samples = samples[None, :]
    frames = frame_signal(samples, cfg) * hann_window(cfg.window_len)
    mag = np.abs(np.fft.rfft(frames, axis=-1))        # (B, T, n_bins)
    mag = np.swapaxes(mag, -1, -2)                     # (B, n_bins, T)
    return mag[0] if squeeze else mag


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_bins). Rows are unnormalized."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.window_len
    fb = np.zeros((cfg.n_mels, cfg.n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
        if fb[m].sum() <= 0.0:
            # Guarantee a non-empty row even when a triangle falls between bins.
            fb[m, int(np.argmin(np.abs(bin_hz - mid)))] = 1.0
    return fb


def mel_from_samples(samples: np.ndarray, cfg: StftConfig, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Batched log-mel. (B, L) -> (B, n_mels, T) float32."""
    if filterbank is None:
        filterbank = mel_filterbank(cfg)
    mag = stft_magnitude(samples, cfg)
    mel = np.einsum("mf,...ft->...mt", filterbank, mag)
    return np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)


def wav_to_mel(w: Waveform, cfg: StftConfig, filterbank: np.ndarray | None = None) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate mismatch: waveform {w.sample_rate}, config {cfg.sample_rate}")
    return MelSpectrogram(mel_from_samples(w.samples[None, :], cfg, filterbank)[0], cfg)


def pad_mel_frames(values: np.ndarray, target_frames: int, cfg: StftConfig) -> np.ndarray:
    """Right-pad (..., n_mels, T) with the log floor up to target_frames."""
    t = values.shape[-1]
    if t > target_frames:
        raise InputError(f"mel has {t} frames, more than target {target_frames}")
    if t == target_frames:
        return values
    pad = [(0, 0)] * (values.ndim - 1) + [(0, target_frames - t)]
    return np.pad(values, pad, constant_values=np.float32(np.log(cfg.log_floor)))


def normalize_log_mel(values):
    """Squash log-mel values to roughly unit scale for network inputs."""
    return (values - LOGMEL_NORM_OFFSET) / LOGMEL_NORM_SCALE


def denormalize_log_mel(values):
    return values * LOGMEL_NORM_SCALE + LOGMEL_NORM_OFFSET


def write_wav(path, w: Waveform) -> None:
    """Mono 16-bit PCM little-endian WAV."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise InputError(f"{path}: expected mono 16-bit PCM")
        rate = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32767.0, rate)
