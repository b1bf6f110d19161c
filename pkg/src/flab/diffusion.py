"""Denoising diffusion over VAE latents.

Forward process: z_n = sqrt(alpha_bar_n) z_0 + sqrt(1 - alpha_bar_n) eps.
Training minimizes the noise-prediction objective
E ||eps - eps_hat(z_n, n, E)||^2 with condition embedding E. Sampling runs
the ancestral reverse chain, optionally on an evenly strided subset of the
training steps.

Every per-candidate random stream is derived from that candidate's own seed,
so batched sampling is bit-identical to sampling each candidate alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericalError
from .utils import derive_seed, rng_for


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray        # (N,), increasing, in (0, 1)
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative products, strictly decreasing

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, n) -> np.ndarray:
        """alpha_bar for 1-based step index n (0 maps to 1.0)."""
        n = np.asarray(n)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[n]


def make_schedule(n_steps: int, kind: str = "linear",
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule. The terminal marginal must be near-Gaussian
    (alpha_bar_N < 1e-3), which for the default endpoints needs N >= ~690."""
    if n_steps < 10:
        raise ConfigError(f"schedule needs at least 10 steps, got {n_steps}")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    if not (np.all(beta > 0) and np.all(beta < 1)):
        raise ConfigError("beta values must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not np.all(np.diff(alpha_bar) < 0):
        raise ConfigError("alpha_bar must be strictly decreasing")
    if alpha_bar[-1] >= 1e-3:
        raise ConfigError(
            f"terminal alpha_bar {alpha_bar[-1]:.3e} >= 1e-3; increase n_steps "
            f"(>= ~690 for beta in [{beta_start}, {beta_end}])")
    return NoiseSchedule(beta, alpha, alpha_bar)


def q_sample(z0, n, eps, sched: NoiseSchedule):
    """Noised latent at 1-based step n; n may be a scalar or a per-sample array."""
    n_arr = np.atleast_1d(np.asarray(n, dtype=np.int64))
    if np.any(n_arr < 1) or np.any(n_arr > sched.n_steps):
        raise InputError(f"step out of range 1..{sched.n_steps}")
    ab = sched.alpha_bar[n_arr - 1]
    if torch.is_tensor(z0):
        shape = (-1,) + (1,) * (z0.ndim - 1)
        ab_t = torch.as_tensor(ab, dtype=z0.dtype)
        if np.isscalar(n) or np.asarray(n).ndim == 0:
            ab_t = ab_t[0]
        else:
            ab_t = ab_t.reshape(shape)
        return torch.sqrt(ab_t) * z0 + torch.sqrt(1.0 - ab_t) * eps
    ab_v = ab[0] if (np.isscalar(n) or np.asarray(n).ndim == 0) else ab.reshape((-1,) + (1,) * (np.asarray(z0).ndim - 1))
    return np.sqrt(ab_v) * np.asarray(z0) + np.sqrt(1.0 - ab_v) * np.asarray(eps)


@dataclass
class DiffusionBatch:
    z0: torch.Tensor     # (B, C, H, W)
    cond: torch.Tensor   # (B, D)
    n: torch.Tensor      # (B,) long, 1-based
    eps: torch.Tensor    # (B, C, H, W)

    def __post_init__(self):
        b = self.z0.shape[0]
        if not (self.cond.shape[0] == b and self.n.shape[0] == b and self.eps.shape[0] == b):
            raise InputError("inconsistent batch sizes in diffusion batch")
        if int(self.n.min()) < 1:
            raise InputError("step indices are 1-based")


def training_loss(batch: DiffusionBatch, model, sched: NoiseSchedule,
                  reduction: str = "sum") -> torch.Tensor:
    """Noise-prediction loss.

    reduction="sum": batch mean of the squared L2 norm per sample (sum over
    latent dims). reduction="mean": per-element mean, used by the optimizer
    loop (identical up to the constant latent size).
    """
    if int(batch.n.max()) > sched.n_steps:
        raise InputError(f"step out of range 1..{sched.n_steps}")
    z_n = q_sample(batch.z0, batch.n.numpy(), batch.eps, sched)
    pred = model(z_n, batch.n, batch.cond)
    sq = (batch.eps - pred) ** 2
    loss = sq.flatten(1).sum(dim=1).mean() if reduction == "sum" else sq.mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite diffusion loss")
    return loss


def sampling_steps(sched: NoiseSchedule, n_sample_steps: int | None) -> np.ndarray:
    """Descending 1-based step indices, evenly strided, always ending at 1."""
    n = sched.n_steps
    if n_sample_steps is None or n_sample_steps >= n:
        return np.arange(n, 0, -1)
    if n_sample_steps < 1:
        raise ConfigError("need at least one sampling step")
    steps = np.unique(np.round(np.linspace(1, n, n_sample_steps)).astype(np.int64))
    return steps[::-1]


Z0_CLAMP = 8.0  # bound on predicted clean latents (standardized units)


@torch.no_grad()
def ddpm_sample_batch(conds: np.ndarray, model, sched: NoiseSchedule, seeds,
                      shape: tuple, n_sample_steps: int | None = None) -> np.ndarray:
    """Ancestral sampling for a batch of conditions with independent seeds.

    conds: (B, D); seeds: length-B ints. Returns (B, *shape) float32. The
    noise stream of candidate i depends only on seeds[i], so results do not
    depend on how candidates are grouped into batches.

    The predicted clean latent is clamped to +-Z0_CLAMP standardized units
    each step; near-terminal steps divide by sqrt(alpha_bar) ~ 1e-2, and an
    unconverged denoiser would otherwise send the chain to overflow.
    """
    conds = np.asarray(conds, dtype=np.float32)
    seeds = list(seeds)
    if conds.ndim != 2 or len(seeds) != conds.shape[0]:
        raise InputError("conds must be (B, D) with one seed per row")
    model.eval()
    steps = sampling_steps(sched, n_sample_steps)
    rngs = [rng_for(int(s), "ddpm") for s in seeds]
    z = torch.from_numpy(np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32))
    cond_t = torch.from_numpy(conds)
    for k, n in enumerate(steps):
        ab = float(sched.alpha_bar[n - 1])
        ab_prev = float(sched.alpha_bar[steps[k + 1] - 1]) if k + 1 < len(steps) else 1.0
        n_t = torch.full((len(seeds),), int(n), dtype=torch.long)
        eps_hat = model(z, n_t, cond_t)
        z0_pred = torch.clamp((z - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab),
                              -Z0_CLAMP, Z0_CLAMP)
        alpha_eff = ab / ab_prev
        beta_eff = 1.0 - alpha_eff
        mean = (np.sqrt(ab_prev) * beta_eff / (1.0 - ab)) * z0_pred \
            + (np.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab)) * z
        if ab_prev < 1.0:
            var = beta_eff * (1.0 - ab_prev) / (1.0 - ab)
            noise = torch.from_numpy(np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32))
            z = mean + np.sqrt(max(var, 0.0)) * noise
        else:
            z = mean
    return z.numpy().astype(np.float32)


def ddpm_sample(cond: np.ndarray, model, sched: NoiseSchedule, seed: int,
                shape: tuple, n_sample_steps: int | None = None) -> np.ndarray:
    """Single-condition convenience wrapper around ddpm_sample_batch."""
    return ddpm_sample_batch(np.asarray(cond)[None, :], model, sched, [seed], shape, n_sample_steps)[0]


# --------------------------------------------------------------------------
# Training loop

@dataclass
class LdmTrainConfig:
    steps: int = 700
    batch_size: int = 32
    lr: float = 1e-3
    tuner_lr: float | None = None        # None: follow lr
    seed: int = 0
    cond_dropout: float = 0.0
    checkpoint_every: int = 0            # 0 disables periodic checkpoints
    checkpoint_hook: object = None       # callable(step, state) when enabled
    probe_every: int = 0                 # 0 disables periodic validation probes
    probe_hook: object = None            # callable(step, state) when enabled


@dataclass
class LdmTrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Adam
    step: int = 0
    loss_history: list = field(default_factory=list)


def start_ldm_training(model, cfg: LdmTrainConfig, tuner=None) -> LdmTrainState:
    groups = [{"params": list(model.parameters()), "lr": cfg.lr}]
    if tuner is not None:
        trainable = [p for p in tuner.parameters() if p.requires_grad]
        if trainable:
            # The tuning layer nudges embeddings gently: a lower rate keeps
            # the generator from chasing fast-moving conditions.
            groups.append({"params": trainable,
                           "lr": cfg.lr if cfg.tuner_lr is None else cfg.tuner_lr})
    return LdmTrainState(model, torch.optim.Adam(groups))


def train_ldm(latents: np.ndarray, base_conds: np.ndarray, sched: NoiseSchedule,
              cfg: LdmTrainConfig, state: LdmTrainState, tuner=None) -> LdmTrainState:
    """Run cfg.steps optimizer steps from state.step onward.

    base_conds holds one condition vector per clip; when a tuner is given it
    is applied (with gradients) to the condition on every step, training the
    tuner jointly whenever its parameters are trainable.

    All per-step randomness (batch indices, timesteps, noise, condition
    dropout) is keyed by (cfg.seed, step), so resuming from a checkpoint at
    step k reproduces the exact continuation of an uninterrupted run.
    """
    n_clips = latents.shape[0]
    if n_clips == 0:
        raise InputError("no training latents")
    if base_conds.shape[0] != n_clips:
        raise InputError("one condition per latent required")
    latents_t = torch.from_numpy(np.asarray(latents, dtype=np.float32))
    conds_t = torch.from_numpy(np.asarray(base_conds, dtype=np.float32))
    model = state.model
    model.train()
    batch = min(cfg.batch_size, n_clips)
    end_step = state.step + cfg.steps
    while state.step < end_step:
        step = state.step
        rng = rng_for(cfg.seed, "ldm-step", step)
        idx = rng.choice(n_clips, size=batch, replace=False)
        n = rng.integers(1, sched.n_steps + 1, size=batch)
        eps = torch.from_numpy(rng.standard_normal((batch,) + latents_t.shape[1:]).astype(np.float32))
        cond = conds_t[idx]
        if tuner is not None:
            cond = tuner(cond)
        if cfg.cond_dropout > 0:
            keep = torch.from_numpy((rng.uniform(size=batch) >= cfg.cond_dropout).astype(np.float32))
            cond = cond * keep[:, None]
        db = DiffusionBatch(latents_t[idx], cond, torch.from_numpy(n), eps)
        loss = training_loss(db, model, sched, reduction="mean")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.loss_history.append(float(loss.detach()))
        state.step += 1
        if cfg.checkpoint_every and cfg.checkpoint_hook and state.step % cfg.checkpoint_every == 0:
            cfg.checkpoint_hook(state.step, state)
        if cfg.probe_every and cfg.probe_hook and state.step % cfg.probe_every == 0:
            cfg.probe_hook(state.step, state)
            model.train()
    model.eval()
    return state


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


# --------------------------------------------------------------------------
# Optimizer state (de)serialization for exact mid-stage resume

def adam_state_to_arrays(state: LdmTrainState, named_params: list, prefix: str = "optim") -> dict:
    out = {f"{prefix}.step": np.array([state.step], dtype=np.float32)}
    opt_state = state.optimizer.state
    for name, p in named_params:
        st = opt_state.get(p)
        if st is None:
            continue
        out[f"{prefix}.{name}.m"] = st["exp_avg"].detach().numpy()
        out[f"{prefix}.{name}.v"] = st["exp_avg_sq"].detach().numpy()
        out[f"{prefix}.{name}.t"] = np.array([float(st["step"])], dtype=np.float32)
    return out


def adam_state_from_arrays(state: LdmTrainState, named_params: list, arrays: dict,
                           prefix: str = "optim") -> None:
    state.step = int(arrays[f"{prefix}.step"][0])
    for name, p in named_params:
        key = f"{prefix}.{name}.m"
        if key not in arrays:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(float(arrays[f"{prefix}.{name}.t"][0])),
            "exp_avg": torch.from_numpy(np.array(arrays[key])).reshape(p.shape),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{prefix}.{name}.v"])).reshape(p.shape),
        }
