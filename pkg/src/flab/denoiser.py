"""Conditional noise-prediction UNet over VAE latents.

Two resolution levels. Each residual block is modulated by a context vector
combining a sinusoidal timestep embedding with the projected condition
embedding (feature-wise affine: h -> (1 + scale) * h + shift). The final
conv is zero-initialized so the network starts as the identity-to-zero map.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .utils import derive_seed


def sinusoidal_embedding(n: torch.Tensor, dim: int) -> torch.Tensor:
    # n: (B,) 1-based step indices
    half = dim // 2
    freqs = torch.exp(-np.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    angles = n.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class FilmResBlock(nn.Module):
    def __init__(self, channels: int, ctx_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(ctx_dim, 2 * channels)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.act = nn.SiLU()

    def forward(self, x, ctx):
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.film(ctx)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class ConditionalUNet(nn.Module):
    def __init__(self, latent_channels: int = 4, cond_dim: int = 64,
                 width: int = 16, ctx_dim: int = 96, time_dim: int = 64):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, ctx_dim), nn.SiLU(), nn.Linear(ctx_dim, ctx_dim))
        self.cond_mlp = nn.Sequential(nn.Linear(cond_dim, ctx_dim), nn.SiLU(), nn.Linear(ctx_dim, ctx_dim))
        w, w2 = width, 2 * width
        self.in_conv = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.res_down = FilmResBlock(w, ctx_dim)
        self.down = nn.Conv2d(w, w2, 3, stride=2, padding=1)
        self.mid1 = FilmResBlock(w2, ctx_dim)
        self.mid2 = FilmResBlock(w2, ctx_dim)
        self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w2, w, 3, padding=1))
        self.fuse = nn.Conv2d(2 * w, w, 3, padding=1)
        self.res_up = FilmResBlock(w, ctx_dim)
        self.out_norm = nn.GroupNorm(min(8, w), w)
        self.out_conv = nn.Conv2d(w, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.act = nn.SiLU()

    def forward(self, z, n, cond):
        ctx = self.act(self.time_mlp(sinusoidal_embedding(n, self.time_dim)) + self.cond_mlp(cond))
        h0 = self.in_conv(z)
        h0 = self.res_down(h0, ctx)
        h = self.down(h0)
        h = self.mid1(h, ctx)
        h = self.mid2(h, ctx)
        h = self.up(h)[..., :h0.shape[-2], :h0.shape[-1]]  # crop for odd input dims
        h = self.fuse(torch.cat([h, h0], dim=1))
        h = self.res_up(h, ctx)
        return self.out_conv(self.act(self.out_norm(h)))


def init_denoiser(latent_channels: int, cond_dim: int, width: int, ctx_dim: int, seed: int) -> ConditionalUNet:
    torch.manual_seed(derive_seed(seed, "unet-init"))
    return ConditionalUNet(latent_channels, cond_dim, width, ctx_dim)


def module_to_arrays(module: nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{name}": p.detach().numpy() for name, p in module.state_dict().items()}


def module_from_arrays(module: nn.Module, arrays: dict, prefix: str) -> nn.Module:
    state = {}
    for key, arr in arrays.items():
        if key.startswith(prefix + "."):
            state[key[len(prefix) + 1:]] = torch.from_numpy(np.array(arr))
    module.load_state_dict(state)
    return module
