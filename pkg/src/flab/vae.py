"""Variational autoencoder compressing log-mel spectrograms into the
diffusion latent space.

Both spatial mel dimensions shrink by the configured compression level
(a power of two; one stride-2 stage per factor of two). Latents are
standardized per channel with train-set statistics before diffusion sees
them; the statistics live in the checkpoint next to the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .audio import LOGMEL_NORM_SCALE, denormalize_log_mel, normalize_log_mel
from .errors import ConfigError, InputError, NumericalError
from .utils import derive_seed, rng_for


@dataclass
class LatentTensor:
    values: np.ndarray       # (C, H, W)
    pad_frames: int = 0      # mel frames added on the right before encoding

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise InputError(f"latent must be (C, H, W), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("latent contains non-finite values")


class VaeEncoderNet(nn.Module):
    def __init__(self, latent_channels: int, width: int, n_down: int):
        super().__init__()
        layers, c_in = [], 1
        for i in range(n_down):
            c_out = width * (2 ** i)
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.SiLU()]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        return self.head(self.body(x)).chunk(2, dim=1)  # mean, logvar


class VaeDecoderNet(nn.Module):
    def __init__(self, latent_channels: int, width: int, n_down: int):
        super().__init__()
        c_top = width * (2 ** (n_down - 1))
        layers = [nn.Conv2d(latent_channels, c_top, 3, padding=1), nn.SiLU()]
        c_in = c_top
        for i in reversed(range(n_down)):
            c_out = max(width * (2 ** (i - 1)), width // 2) if i > 0 else width // 2
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.SiLU()]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z)


@dataclass
class VaeParams:
    encoder: VaeEncoderNet
    decoder: VaeDecoderNet
    compression_level: int
    latent_channels: int
    kl_weight: float
    log_floor: float = 1e-5
    latent_mean: np.ndarray = None   # (C,), identity standardization until fitted
    latent_std: np.ndarray = None

    def __post_init__(self):
        if self.compression_level < 1 or self.compression_level & (self.compression_level - 1):
            raise ConfigError(f"compression_level must be a power of 2, got {self.compression_level}")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        c = self.latent_channels
        if self.latent_mean is None:
            self.latent_mean = np.zeros(c, dtype=np.float32)
        if self.latent_std is None:
            self.latent_std = np.ones(c, dtype=np.float32)


def init_vae(latent_channels: int, compression_level: int, width: int,
             kl_weight: float, seed: int, log_floor: float = 1e-5) -> VaeParams:
    n_down = int(np.log2(compression_level))
    torch.manual_seed(derive_seed(seed, "vae-init"))
    enc = VaeEncoderNet(latent_channels, width, n_down)
    dec = VaeDecoderNet(latent_channels, width, n_down)
    return VaeParams(enc, dec, compression_level, latent_channels, kl_weight, log_floor)


def _prep_mel(values: np.ndarray, compression_level: int, log_floor: float) -> tuple[np.ndarray, int]:
    values = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise InputError("mel input contains non-finite values")
    cl = compression_level
    if values.shape[-2] % cl:
        raise InputError(f"mel bins {values.shape[-2]} not divisible by compression {cl}")
    pad = (-values.shape[-1]) % cl
    if pad:
        width = [(0, 0)] * (values.ndim - 1) + [(0, pad)]
        values = np.pad(values, width, constant_values=np.float32(np.log(log_floor)))
    return values, pad


@torch.no_grad()
def vae_encode_batch(mels: np.ndarray, params: VaeParams, seeds=None, chunk: int = 64) -> np.ndarray:
    """(B, M, T) -> (B, C, M/cl, T'/cl); seeds=None takes the posterior mean."""
    mels, _ = _prep_mel(mels, params.compression_level, params.log_floor)
    params.encoder.eval()
    outs = []
    for i in range(0, len(mels), chunk):
        x = torch.from_numpy(normalize_log_mel(mels[i:i + chunk]))[:, None]
        mean, logvar = params.encoder(x)
        z = mean
        if seeds is not None:
            eps = np.stack([rng_for(int(s), "vae-eps").standard_normal(mean.shape[1:])
                            for s in seeds[i:i + chunk]]).astype(np.float32)
            z = mean + torch.exp(0.5 * logvar) * torch.from_numpy(eps)
        outs.append(z.numpy())
    return np.concatenate(outs).astype(np.float32)


def vae_encode(mel, params: VaeParams, seed: int | None = None) -> LatentTensor:
    """Reparameterized encoding; seed=None gives the deterministic mode
    (eps=0). Accepts a MelSpectrogram or a raw (n_mels, T) value array."""
    values = np.asarray(mel.values if hasattr(mel, "values") else mel, dtype=np.float32)
    _, pad = _prep_mel(values, params.compression_level, params.log_floor)
    z = vae_encode_batch(values[None], params, None if seed is None else [seed])[0]
    return LatentTensor(z, pad_frames=pad)


@torch.no_grad()
def vae_decode_batch(latents: np.ndarray, params: VaeParams, chunk: int = 64) -> np.ndarray:
    """(B, C, H, W) -> (B, M, T) log-mel values clamped to >= log(log_floor)."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.shape[1] != params.latent_channels:
        raise InputError(f"latent has {latents.shape[1]} channels, expected {params.latent_channels}")
    params.decoder.eval()
    outs = []
    floor = float(np.log(params.log_floor))
    for i in range(0, len(latents), chunk):
        y = params.decoder(torch.from_numpy(latents[i:i + chunk]))[:, 0]
        outs.append(np.maximum(denormalize_log_mel(y.numpy()), floor))
    return np.concatenate(outs).astype(np.float32)


def vae_decode(z: LatentTensor | np.ndarray, params: VaeParams) -> np.ndarray:
    values = z.values if isinstance(z, LatentTensor) else np.asarray(z, dtype=np.float32)
    if values.ndim != 3:
        raise InputError(f"latent must be (C, H, W), got {values.shape}")
    return vae_decode_batch(values[None], params)[0]


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over non-batch dims."""
    kl = 0.5 * (mean ** 2 + torch.exp(logvar) - logvar - 1.0)
    return kl.flatten(1).sum(dim=1)


def standardize_latents(latents: np.ndarray, params: VaeParams) -> np.ndarray:
    shape = (1, -1, 1, 1) if latents.ndim == 4 else (-1, 1, 1)
    return (latents - params.latent_mean.reshape(shape)) / params.latent_std.reshape(shape)


def destandardize_latents(latents: np.ndarray, params: VaeParams) -> np.ndarray:
    shape = (1, -1, 1, 1) if latents.ndim == 4 else (-1, 1, 1)
    return latents * params.latent_std.reshape(shape) + params.latent_mean.reshape(shape)


@dataclass
class VaeTrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    kl_weight: float = 1e-4
    latent_channels: int = 4
    compression_level: int = 4
    width: int = 32
    seed: int = 0
    val_fraction: float = 0.1


def train_vae(mels: np.ndarray, cfg: VaeTrainConfig, log_floor: float = 1e-5) -> tuple[VaeParams, dict]:
    """Train on (B, M, T) log-mel values; returns params with fitted latent
    standardization plus a history of losses and val reconstruction errors."""
    mels, _ = _prep_mel(np.asarray(mels, dtype=np.float32), cfg.compression_level, log_floor)
    n = len(mels)
    if n < 2:
        raise InputError("need at least 2 training mels")
    params = init_vae(cfg.latent_channels, cfg.compression_level, cfg.width,
                      cfg.kl_weight, cfg.seed, log_floor)
    modules = nn.ModuleList([params.encoder, params.decoder])
    opt = torch.optim.Adam(modules.parameters(), lr=cfg.lr)

    order = rng_for(cfg.seed, "vae-split").permutation(n)
    n_val = max(1, round(cfg.val_fraction * n)) if cfg.val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    norm = normalize_log_mel(mels)

    def val_recon_error() -> float:
        if n_val == 0:
            return float("nan")
        with torch.no_grad():
            x = torch.from_numpy(norm[val_idx])[:, None]
            mean, _ = params.encoder(x)
            recon = params.decoder(mean)
            # Error in raw log-mel units.
            return float((recon - x).abs().mean()) * LOGMEL_NORM_SCALE

    history = {"loss": [], "val_recon_init": val_recon_error()}
    batch = min(cfg.batch_size, len(train_idx))
    for step in range(cfg.steps):
        rng = rng_for(cfg.seed, "vae-step", step)
        idx = rng.choice(train_idx, size=batch, replace=False)
        x = torch.from_numpy(norm[idx])[:, None]
        eps = torch.from_numpy(rng.standard_normal((batch, cfg.latent_channels,
                                                    x.shape[2] // cfg.compression_level,
                                                    x.shape[3] // cfg.compression_level)).astype(np.float32))
        mean, logvar = params.encoder(x)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = params.decoder(z)
        kl = gaussian_kl(mean, logvar).mean() / mean[0].numel()
        loss = (recon - x).abs().mean() + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericalError(f"VAE training diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["loss"].append(float(loss.detach()))
    history["val_recon_final"] = val_recon_error()
    params.encoder.eval()
    params.decoder.eval()

    train_latents = vae_encode_batch(mels[train_idx], params)
    params.latent_mean = train_latents.mean(axis=(0, 2, 3)).astype(np.float32)
    params.latent_std = np.maximum(train_latents.std(axis=(0, 2, 3)), 1e-4).astype(np.float32)
    return params, history
