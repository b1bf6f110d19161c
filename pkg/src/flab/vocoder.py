"""Mel-to-waveform conversion: mel pseudo-inverse followed by Griffin-Lim
phase reconstruction.

Batched throughout; the per-clip phase initialization derives from the
clip's own seed, so batching never changes an individual clip's output.
The output length is exactly frames * hop + window_len - hop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import StftConfig, Waveform, frame_signal, hann_window, mel_filterbank
from .errors import ConfigError, InputError
from .utils import rng_for

PEAK_CEIL = 0.95


@dataclass
class VocoderConfig:
    stft: StftConfig
    n_iters: int = 32
    mel_pinv: np.ndarray = None   # (n_bins, n_mels)
    mel_refine_iters: int = 4     # multiplicative non-negative refinement steps

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if self.mel_pinv is None:
            # Non-negative pseudo-inverse of the analysis filterbank.
            self.mel_pinv = np.clip(np.linalg.pinv(mel_filterbank(self.stft)), 0.0, None)
        if self.mel_pinv.shape != (self.stft.n_bins, self.stft.n_mels):
            raise ConfigError(f"mel_pinv must have shape (n_bins, n_mels), got {self.mel_pinv.shape}")


def invert_mel(mel_mag: np.ndarray, cfg: "VocoderConfig", filterbank: np.ndarray | None = None) -> np.ndarray:
    """Mel magnitudes (..., n_mels, T) -> linear magnitudes (..., n_bins, T).

    Pseudo-inverse start, then a few multiplicative updates toward
    fb @ mag = mel_mag; the refinement markedly reduces log-domain error in
    quiet regions where the clipped pseudo-inverse leaks energy.
    """
    fb = mel_filterbank(cfg.stft) if filterbank is None else filterbank
    mag = np.maximum(np.einsum("fm,...mt->...ft", cfg.mel_pinv, mel_mag), 1e-10)
    col_weight = fb.sum(axis=0)[:, None]  # (n_bins, 1)
    for _ in range(cfg.mel_refine_iters):
        recon = np.maximum(np.einsum("mf,...ft->...mt", fb, mag), 1e-12)
        mag = mag * np.einsum("mf,...mt->...ft", fb, mel_mag / recon) / np.maximum(col_weight, 1e-12)
    return mag


def expected_length(frames: int, cfg: StftConfig) -> int:
    return frames * cfg.hop + cfg.window_len - cfg.hop


def _stft_complex(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    window = hann_window(cfg.window_len).astype(x.dtype)
    return np.fft.rfft(frame_signal(x, cfg) * window, axis=-1)


def _istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse. spec: (..., T, n_bins) -> (..., L).

    The overlap weight is floored at 1% of its peak: the first and last few
    samples (where the analysis window vanishes) fade out instead of being
    amplified, which keeps inconsistent phase fields bounded.
    """
    frames = np.fft.irfft(spec, n=cfg.window_len, axis=-1)
    t = frames.shape[-2]
    length = expected_length(t, cfg)
    window = hann_window(cfg.window_len).astype(frames.dtype)
    out = np.zeros(frames.shape[:-2] + (length,), dtype=frames.dtype)
    weight = np.zeros(length, dtype=frames.dtype)
    for f in range(t):
        sl = slice(f * cfg.hop, f * cfg.hop + cfg.window_len)
        out[..., sl] += frames[..., f, :] * window
        weight[sl] += window ** 2
    return out / np.maximum(weight, 0.01 * weight.max())


def griffin_lim(linear_mag: np.ndarray, cfg: StftConfig, n_iters: int, seed: int,
                track_convergence: bool = False):
    """Phase reconstruction for one magnitude spectrogram (n_bins, T).

    Returns the waveform, plus the per-iteration spectral-convergence errors
    when track_convergence is set.
    """
    mag = np.asarray(linear_mag, dtype=np.float64).T  # (T, n_bins)
    rng = rng_for(seed, "griffin-lim")
    phase = np.exp(2j * np.pi * rng.uniform(size=mag.shape))
    errors = []
    x = _istft(mag * phase, cfg)
    for _ in range(n_iters):
        spec = _stft_complex(x, cfg)
        if track_convergence:
            est = np.abs(spec)
            errors.append(float(np.linalg.norm(est - mag) / max(np.linalg.norm(mag), 1e-12)))
        phase = spec / np.maximum(np.abs(spec), 1e-12)
        x = _istft(mag * phase, cfg)
    return (x, errors) if track_convergence else x


def mel_to_wav(mel, cfg: VocoderConfig, seed: int) -> Waveform:
    """Decode one log-mel spectrogram (MelSpectrogram or raw (n_mels, T)
    values) to a peak-limited waveform."""
    values = mel.values if hasattr(mel, "values") else mel
    return mel_batch_to_wavs(np.asarray(values)[None], cfg, [seed])[0]


def mel_batch_to_wavs(mel_values: np.ndarray, cfg: VocoderConfig, seeds, chunk: int = 64,
                      dtype=np.float32) -> list[Waveform]:
    """Decode (B, n_mels, T) log-mel arrays; one independent seed per clip.

    Batch Griffin-Lim runs in float32: its per-iteration projection error is
    orders of magnitude above float32 resolution, and the narrower dtype
    halves FFT bandwidth.
    """
    mels = np.asarray(mel_values, dtype=dtype)
    if mels.ndim != 3 or mels.shape[1] != cfg.stft.n_mels:
        raise InputError(f"expected (B, {cfg.stft.n_mels}, T) mel batch, got shape {mels.shape}")
    if not np.all(np.isfinite(mels)):
        raise InputError("mel input contains non-finite values")
    seeds = list(seeds)
    if len(seeds) != len(mels):
        raise InputError("one seed per mel required")

    fb = mel_filterbank(cfg.stft).astype(dtype)
    out = []
    for lo in range(0, len(mels), chunk):
        batch = mels[lo:lo + chunk]
        # (b, T, n_bins) target magnitudes.
        mag = np.swapaxes(invert_mel(np.exp(batch), cfg, fb), -1, -2).astype(dtype)
        rngs = [rng_for(int(s), "griffin-lim") for s in seeds[lo:lo + chunk]]
        phase = np.exp(2j * np.pi * np.stack([r.uniform(size=mag.shape[1:]) for r in rngs])
                       ).astype(np.complex64 if dtype == np.float32 else np.complex128)
        x = _istft(mag * phase, cfg.stft)
        for _ in range(cfg.n_iters):
            spec = _stft_complex(x, cfg.stft)
            phase = spec / np.maximum(np.abs(spec), 1e-12)
            x = _istft(mag * phase, cfg.stft)
        for row in x:
            peak = float(np.max(np.abs(row)))
            if peak > PEAK_CEIL:
                row = row * (PEAK_CEIL / peak)
            out.append(Waveform(row.astype(np.float32), cfg.stft.sample_rate))
    return out
