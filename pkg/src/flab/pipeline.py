"""End-to-end orchestration: staged training, generation, and evaluation.

Stages
------
pretrain: trains the contrastive encoder and the VAE on the combined
corpora, then the latent diffusion generator on the pretraining corpus
conditioned on each clip's own audio embedding. finetune: re-trains the
generator on the small labelled corpus conditioned on per-class text
embeddings (optionally through a trainable tuning layer), starting from the
pretrained weights unless explicitly from scratch.

Checkpoints are single named-array container files holding every module's
weights, the optimizer state of the stage, and a metadata block sufficient
to rebuild the full stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import clap, corpus, diffusion, fad, selection, tuner as tuner_mod, vae as vae_mod, vocoder
from .audio import StftConfig, Waveform, mel_filterbank, mel_from_samples, n_frames, pad_mel_frames, read_wav, write_wav
from .configio import RunConfig, config_hash, config_to_text, save_config
from .container import load_container, save_container
from .denoiser import init_denoiser, module_from_arrays, module_to_arrays
from .errors import ConfigError, InputError
from .utils import derive_seed, rng_for

TUNER_MODES = ("none", "trainable", "frozen")


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def corpus_finetune(self) -> Path:
        return self.root / "corpus" / "finetune"

    @property
    def corpus_pretrain(self) -> Path:
        return self.root / "corpus" / "pretrain"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def generated(self) -> Path:
        return self.root / "generated"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def manifest(self, which: str, split: str) -> Path:
        base = self.corpus_finetune if which == "finetune" else self.corpus_pretrain
        return base / f"manifest_{split}.jsonl"


# --------------------------------------------------------------------------
# Data

def synth_data(cfg: RunConfig, ws: Workspace) -> dict:
    """Build both corpora; returns {corpus name: {split: manifest}}."""
    seed = cfg.run.seed
    ft = corpus.build_corpus(
        corpus.finetune_classes(cfg.frontend.duration_s),
        cfg.corpus.finetune_per_class, cfg.corpus.split_ratio,
        derive_seed(seed, "corpus-finetune"), ws.corpus_finetune,
        n_eval_per_class=cfg.corpus.eval_per_class,
        sample_rate=cfg.frontend.sample_rate)
    pre = corpus.build_corpus(
        corpus.pretrain_classes(cfg.frontend.duration_s),
        cfg.corpus.pretrain_per_class, cfg.corpus.split_ratio,
        derive_seed(seed, "corpus-pretrain"), ws.corpus_pretrain,
        primary_split="pretrain", sample_rate=cfg.frontend.sample_rate)
    return {"finetune": ft, "pretrain": pre}


@dataclass
class MelDataset:
    mels: np.ndarray          # (N, n_mels, mel_frames)
    classes: list
    texts: list
    clip_ids: list


def load_mel_dataset(manifest: corpus.CorpusManifest, frontend, chunk: int = 64) -> MelDataset:
    stft = frontend.stft()
    fb = mel_filterbank(stft)
    mels, classes, texts, ids = [], [], [], []
    entries = manifest.entries
    for lo in range(0, len(entries), chunk):
        batch = entries[lo:lo + chunk]
        samples = np.stack([read_wav(manifest.wav_path(e)).samples for e in batch])
        m = mel_from_samples(samples, stft, fb)
        mels.append(pad_mel_frames(m, frontend.mel_frames, stft))
        for e in batch:
            classes.append(e.class_name)
            texts.append(e.text)
            ids.append(e.clip_id)
    return MelDataset(np.concatenate(mels), classes, texts, ids)


# --------------------------------------------------------------------------
# Checkpoint bundles

def _bundle_metadata(cfg: RunConfig, stage: str, step: int, vocab, **extra) -> dict:
    meta = {
        "format": 1,
        "stage": stage,
        "step": step,
        "config_hash": config_hash(cfg),
        "config_text": config_to_text(cfg),
        "vocab": list(vocab.tokens),
        "schedule": {"n_steps": cfg.schedule.n_steps, "kind": cfg.schedule.kind,
                     "beta_start": cfg.schedule.beta_start, "beta_end": cfg.schedule.beta_end},
        "dims": {"embed_dim": cfg.model.embed_dim, "latent_channels": cfg.model.latent_channels,
                 "unet_width": cfg.model.unet_width, "ctx_dim": cfg.model.ctx_dim,
                 "vae_width": cfg.model.vae_width, "clap_text_width": cfg.model.clap_text_width,
                 "clap_audio_width": cfg.model.clap_audio_width, "n_mels": cfg.frontend.n_mels,
                 "mel_frames": cfg.frontend.mel_frames, "compression_level": 4,
                 "log_floor": cfg.frontend.log_floor},
    }
    meta.update(extra)
    return meta


def _vae_to_arrays(params: vae_mod.VaeParams) -> dict:
    out = module_to_arrays(params.encoder, "vae.encoder")
    out.update(module_to_arrays(params.decoder, "vae.decoder"))
    out["vae.latent_mean"] = params.latent_mean
    out["vae.latent_std"] = params.latent_std
    return out


def _vae_from_arrays(arrays: dict, dims: dict, kl_weight: float) -> vae_mod.VaeParams:
    params = vae_mod.init_vae(dims["latent_channels"], dims["compression_level"],
                              dims["vae_width"], kl_weight, seed=0, log_floor=dims["log_floor"])
    module_from_arrays(params.encoder, arrays, "vae.encoder")
    module_from_arrays(params.decoder, arrays, "vae.decoder")
    params.latent_mean = np.array(arrays["vae.latent_mean"])
    params.latent_std = np.array(arrays["vae.latent_std"])
    params.encoder.eval()
    params.decoder.eval()
    return params


@dataclass
class Stack:
    cfg: RunConfig
    encoder: clap.EncoderParams
    vae: vae_mod.VaeParams
    denoiser: torch.nn.Module
    tuner: tuner_mod.TuningLayer | None
    sched: diffusion.NoiseSchedule
    metadata: dict

    @property
    def stft(self) -> StftConfig:
        return self.cfg.frontend.stft()

    def class_text(self, label: str) -> str:
        texts = self.metadata.get("class_texts", {})
        if label in texts:
            return texts[label]
        return corpus.label_to_text(label)

    def condition_for(self, label: str) -> np.ndarray:
        """Raw generator condition: (tuned) text embedding, not re-normalized."""
        emb = clap.encode_text(clap.tokenize(self.class_text(label), self.encoder.vocab), self.encoder)
        if self.tuner is not None:
            emb = tuner_mod.apply_tuning(emb, self.tuner)
        return emb

    def scoring_target(self, label: str) -> np.ndarray:
        """Unit-norm selection target for a label."""
        if self.tuner is not None:
            return tuner_mod.tuned_target(label, self.encoder, self.tuner,
                                          {label: self.class_text(label)})
        emb = clap.encode_text(clap.tokenize(self.class_text(label), self.encoder.vocab), self.encoder)
        return emb / max(float(np.linalg.norm(emb)), 1e-12)


def save_stack(path, cfg: RunConfig, encoder, vae_params, denoiser, tuner_layer,
               opt_arrays: dict | None, stage: str, step: int, **extra_meta) -> Path:
    arrays = clap.encoder_to_arrays(encoder)
    arrays.update(_vae_to_arrays(vae_params))
    arrays.update(module_to_arrays(denoiser, "ldm"))
    if tuner_layer is not None:
        arrays.update(tuner_mod.tuner_to_arrays(tuner_layer))
    if opt_arrays:
        arrays.update(opt_arrays)
    meta = _bundle_metadata(cfg, stage, step, encoder.vocab, **extra_meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_container(path, arrays, meta)
    return path


def load_stack(path) -> Stack:
    from .configio import config_from_text

    arrays, meta = load_container(path)
    import hashlib

    stored = hashlib.sha256(meta["config_text"].encode("utf-8")).hexdigest()[:16]
    if stored != meta["config_hash"]:
        raise ConfigError(f"{path}: checkpoint config text does not match its recorded hash")
    cfg = config_from_text(meta["config_text"])
    dims = meta["dims"]
    vocab = clap.Vocabulary(tuple(meta["vocab"]))
    encoder = clap.encoder_from_arrays(arrays, vocab, dims["n_mels"], dims["embed_dim"],
                                       dims["clap_text_width"], dims["clap_audio_width"])
    vae_params = _vae_from_arrays(arrays, dims, cfg.train.kl_weight)
    denoiser = init_denoiser(dims["latent_channels"], dims["embed_dim"],
                             dims["unet_width"], dims["ctx_dim"], seed=0)
    module_from_arrays(denoiser, arrays, "ldm")
    denoiser.eval()
    tuner_layer = tuner_mod.tuner_from_arrays(arrays) if "tuner.W" in arrays else None
    sched = diffusion.make_schedule(meta["schedule"]["n_steps"], meta["schedule"]["kind"],
                                    meta["schedule"]["beta_start"], meta["schedule"]["beta_end"])
    return Stack(cfg, encoder, vae_params, denoiser, tuner_layer, sched, meta)


def load_arrays(path) -> tuple[dict, dict]:
    return load_container(path)


# --------------------------------------------------------------------------
# Training stages

def build_vocab_for(cfg: RunConfig) -> clap.Vocabulary:
    labels = list(corpus.DEFAULT_WRAP_TABLE)
    texts = list(corpus.DEFAULT_WRAP_TABLE.values()) + labels
    for variants in corpus.DEFAULT_TEXT_VARIANTS.values():
        for v in variants:
            texts.append(v.replace("|", " "))
    return clap.build_vocabulary(texts, corpus.ADJUNCT_WORDS)


def train_pretrain_stage(cfg: RunConfig, ws: Workspace, out_name: str = "pretrain.flab") -> Path:
    """Contrastive encoder + VAE on the combined corpora, then the generator
    on the pretraining corpus with audio-embedding conditions."""
    pre_manifest = corpus.load_manifest(ws.manifest("pretrain", "pretrain"))
    ft_manifest = corpus.load_manifest(ws.manifest("finetune", "train"))
    pre_ds = load_mel_dataset(pre_manifest, cfg.frontend)
    ft_ds = load_mel_dataset(ft_manifest, cfg.frontend)

    vocab = build_vocab_for(cfg)
    all_mels = np.concatenate([pre_ds.mels, ft_ds.mels])
    all_texts = pre_ds.texts + ft_ds.texts
    all_classes = pre_ds.classes + ft_ds.classes

    pairs = [(m, clap.tokenize(t, vocab)) for m, t in zip(all_mels, all_texts)]
    clap_cfg = clap.ClapTrainConfig(steps=cfg.train.clap_steps, batch_size=cfg.train.clap_batch,
                                    seed=derive_seed(cfg.run.seed, "clap"),
                                    embed_dim=cfg.model.embed_dim,
                                    text_width=cfg.model.clap_text_width,
                                    audio_width=cfg.model.clap_audio_width,
                                    val_fraction=cfg.train.val_fraction)
    encoder, clap_hist = clap.train_contrastive(pairs, clap_cfg, vocab, labels=all_classes)

    vae_cfg = vae_mod.VaeTrainConfig(steps=cfg.train.vae_steps, batch_size=cfg.train.vae_batch,
                                     kl_weight=cfg.train.kl_weight,
                                     latent_channels=cfg.model.latent_channels,
                                     width=cfg.model.vae_width,
                                     seed=derive_seed(cfg.run.seed, "vae"),
                                     val_fraction=cfg.train.val_fraction)
    vae_params, vae_hist = vae_mod.train_vae(all_mels, vae_cfg, log_floor=cfg.frontend.log_floor)

    latents = vae_mod.standardize_latents(vae_mod.vae_encode_batch(pre_ds.mels, vae_params), vae_params)
    conds = clap.encode_audio_batch(pre_ds.mels, encoder)

    sched = diffusion.make_schedule(cfg.schedule.n_steps, cfg.schedule.kind,
                                    cfg.schedule.beta_start, cfg.schedule.beta_end)
    model = init_denoiser(cfg.model.latent_channels, cfg.model.embed_dim,
                          cfg.model.unet_width, cfg.model.ctx_dim,
                          derive_seed(cfg.run.seed, "ldm-pretrain"))
    ldm_cfg = diffusion.LdmTrainConfig(steps=cfg.train.ldm_pretrain_steps,
                                       batch_size=cfg.train.ldm_batch, lr=cfg.train.lr,
                                       seed=derive_seed(cfg.run.seed, "ldm-pretrain"),
                                       cond_dropout=cfg.train.cond_dropout)
    state = diffusion.start_ldm_training(model, ldm_cfg)
    diffusion.train_ldm(latents, conds, sched, ldm_cfg, state)

    opt_arrays = diffusion.adam_state_to_arrays(state, [(f"ldm.{n}", p) for n, p in model.named_parameters()])
    path = save_stack(ws.checkpoints / out_name, cfg, encoder, vae_params, model, None,
                      opt_arrays, stage="pretrain", step=state.step,
                      conditioning={"source": "audio_embedding"},
                      lineage=[], history={"clap_val_loss_final": clap_hist["val_loss_final"],
                                           "vae_val_recon_final": vae_hist["val_recon_final"]})
    clap.save_vocabulary(ws.checkpoints / "vocab.txt", vocab)
    save_config(cfg, ws.checkpoints / "config_pretrain.txt")
    return path


def class_text_table(cfg: RunConfig, labels: list[str], text_mode: str,
                     variant_texts: dict | None = None,
                     wrap_table: dict | None = None) -> dict:
    if text_mode not in ("wrapped", "label"):
        raise ConfigError(f"text_mode must be 'wrapped' or 'label', got {text_mode!r}")
    table = {}
    for label in labels:
        if variant_texts and label in variant_texts:
            table[label] = variant_texts[label]
        elif text_mode == "wrapped":
            table[label] = corpus.label_to_text(label, wrap_table)
        else:
            table[label] = label
    return table


def init_finetune_model(cfg: RunConfig, pretrain_arrays: dict | None,
                        from_scratch: bool, seed: int) -> torch.nn.Module:
    model = init_denoiser(cfg.model.latent_channels, cfg.model.embed_dim,
                          cfg.model.unet_width, cfg.model.ctx_dim,
                          derive_seed(seed, "ldm-finetune-init"))
    if not from_scratch:
        if pretrain_arrays is None:
            raise ConfigError("fine-tuning requires a pretrain checkpoint unless from_scratch is set")
        module_from_arrays(model, pretrain_arrays, "ldm")
    return model


def train_finetune_stage(cfg: RunConfig, ws: Workspace, pretrain_ckpt, *,
                         from_scratch: bool = False, tuner_mode: str = "none",
                         text_mode: str | None = None, variant_texts: dict | None = None,
                         seed: int | None = None, steps: int | None = None,
                         out_name: str = "finetune.flab") -> Path:
    """Fine-tune the generator on the labelled corpus with text conditions.

    The encoder and VAE are always reused frozen from the pretrain
    checkpoint; from_scratch only re-initializes the generator weights.
    """
    if tuner_mode not in TUNER_MODES:
        raise ConfigError(f"tuner_mode must be one of {TUNER_MODES}, got {tuner_mode!r}")
    pretrain_ckpt = Path(pretrain_ckpt)
    if not pretrain_ckpt.exists():
        raise ConfigError(f"missing pretrain checkpoint: {pretrain_ckpt}")
    arrays, pre_meta = load_container(pretrain_ckpt)
    if pre_meta.get("stage") != "pretrain":
        raise ConfigError(f"{pretrain_ckpt}: expected a pretrain checkpoint, got stage {pre_meta.get('stage')!r}")

    seed = cfg.run.seed if seed is None else seed
    text_mode = cfg.run.text_mode if text_mode is None else text_mode
    base = load_stack(pretrain_ckpt)
    encoder, vae_params = base.encoder, base.vae

    ft_manifest = corpus.load_manifest(ws.manifest("finetune", "train"))
    ds = load_mel_dataset(ft_manifest, cfg.frontend)
    labels = sorted(set(ds.classes))
    # The corpus's wrapping table is editable; pick up edits made after
    # synthesis.
    table_path = ws.corpus_finetune / "label_text.tsv"
    wrap_table = corpus.load_wrap_table(table_path) if table_path.exists() else None
    texts = class_text_table(cfg, labels, text_mode, variant_texts, wrap_table)

    text_embs = {label: clap.encode_text(clap.tokenize(texts[label], encoder.vocab), encoder)
                 for label in labels}
    conds = np.stack([text_embs[c] for c in ds.classes])
    latents = vae_mod.standardize_latents(vae_mod.vae_encode_batch(ds.mels, vae_params), vae_params)

    layer = None
    if tuner_mode != "none":
        layer = tuner_mod.init_tuning(cfg.model.embed_dim, cfg.train.tuner_noise_std,
                                      derive_seed(seed, "tuner"))
        layer.set_trainable(tuner_mode == "trainable")

    model = init_finetune_model(cfg, arrays, from_scratch, seed)
    sched = base.sched
    ft_lr = cfg.train.ldm_finetune_lr
    ldm_cfg = diffusion.LdmTrainConfig(
        steps=cfg.train.ldm_finetune_steps if steps is None else steps,
        batch_size=cfg.train.ldm_batch, lr=ft_lr,
        tuner_lr=ft_lr * cfg.train.tuner_lr_scale,
        seed=derive_seed(seed, "ldm-finetune"), cond_dropout=cfg.train.cond_dropout)

    out_path = ws.checkpoints / out_name
    meta_common = dict(
        conditioning={"source": "tuned_text_embedding" if tuner_mode == "trainable" else "text_embedding",
                      "text_mode": text_mode},
        class_texts=texts, tuner_mode=tuner_mode, from_scratch=from_scratch,
        finetune_seed=seed,
        lineage=[] if from_scratch else [pre_meta["config_hash"]],
    )

    def named_params():
        pairs = [(f"ldm.{n}", p) for n, p in model.named_parameters()]
        if layer is not None and tuner_mode == "trainable":
            pairs += [(f"tuner.{n}", p) for n, p in layer.named_parameters()]
        return pairs

    state = diffusion.start_ldm_training(model, ldm_cfg, tuner=layer)
    if cfg.train.checkpoint_every:
        def hook(step, st):
            opt = diffusion.adam_state_to_arrays(st, named_params())
            save_stack(out_path.with_suffix(f".step{step}.flab"), cfg, encoder, vae_params,
                       model, layer, opt, stage="finetune", step=step, **meta_common)
        ldm_cfg.checkpoint_every = cfg.train.checkpoint_every
        ldm_cfg.checkpoint_hook = hook

    val_fad_log = []
    if cfg.train.val_fad_every:
        val_manifest = corpus.load_manifest(ws.manifest("finetune", "val"))
        probe_stack = Stack(cfg, encoder, vae_params, model, layer, sched,
                            {"class_texts": texts, "config_hash": config_hash(cfg), "stage": "probe"})
        val_embs, val_classes = manifest_embeddings(val_manifest, probe_stack)
        val_stats = {c: fad.fit_stats(v) for c, v in group_by_class(val_embs, val_classes).items()}

        def probe(step, st):
            batches = synth_candidates_multi(
                probe_stack, [(label, cfg.train.val_fad_clips,
                               derive_seed(seed, "val-fad", step, label), "vfad")
                              for label in labels])
            fads = [fad.frechet_distance(fad.fit_stats(batches[label].embeddings), val_stats[label])
                    for label in labels if cfg.train.val_fad_clips >= 2]
            val_fad_log.append({"step": step, "mean_fad": float(np.mean(fads))})
        ldm_cfg.probe_every = cfg.train.val_fad_every
        ldm_cfg.probe_hook = probe

    diffusion.train_ldm(latents, conds, sched, ldm_cfg, state, tuner=layer)
    if val_fad_log:
        ws.reports.mkdir(parents=True, exist_ok=True)
        with open(ws.reports / f"val_fad_{Path(out_name).stem}.csv", "w") as f:
            f.write("step,mean_fad\n")
            for row in val_fad_log:
                f.write(f"{row['step']},{row['mean_fad']:.10g}\n")

    opt_arrays = diffusion.adam_state_to_arrays(state, named_params())
    return save_stack(out_path, cfg, encoder, vae_params, model, layer, opt_arrays,
                      stage="finetune", step=state.step, val_fad_log=val_fad_log,
                      loss_history=[float(x) for x in state.loss_history[-50:]], **meta_common)


def continue_finetune(cfg: RunConfig, ws: Workspace, mid_ckpt, total_steps: int, *,
                      tuner_mode: str | None = None, text_mode: str | None = None,
                      force: bool = False,
                      out_name: str = "finetune_resumed.flab") -> tuple[Path, list]:
    """Resume an interrupted fine-tune from a mid-stage checkpoint.

    The run config must hash-match the checkpoint unless force is set;
    condition-source mismatches are always configuration errors. Returns the
    final checkpoint path and the losses of the continued steps.
    """
    arrays, meta = load_container(mid_ckpt)
    if meta.get("stage") != "finetune":
        raise ConfigError(f"{mid_ckpt}: not a finetune checkpoint")
    if config_hash(cfg) != meta["config_hash"] and not force:
        raise ConfigError(f"{mid_ckpt}: config hash mismatch on resume (use force to override)")
    if tuner_mode is not None and tuner_mode != meta["tuner_mode"]:
        raise ConfigError(f"condition-source mismatch on resume: checkpoint tuner_mode="
                          f"{meta['tuner_mode']!r}, requested {tuner_mode!r}")
    if text_mode is not None and text_mode != meta["conditioning"]["text_mode"]:
        raise ConfigError(f"condition-source mismatch on resume: checkpoint text_mode="
                          f"{meta['conditioning']['text_mode']!r}, requested {text_mode!r}")

    stack = load_stack(mid_ckpt)
    encoder, vae_params, model, layer = stack.encoder, stack.vae, stack.denoiser, stack.tuner
    if layer is not None:
        layer.set_trainable(meta["tuner_mode"] == "trainable")

    ft_manifest = corpus.load_manifest(ws.manifest("finetune", "train"))
    ds = load_mel_dataset(ft_manifest, cfg.frontend)
    texts = meta["class_texts"]
    text_embs = {label: clap.encode_text(clap.tokenize(texts[label], encoder.vocab), encoder)
                 for label in sorted(set(ds.classes))}
    conds = np.stack([text_embs[c] for c in ds.classes])
    latents = vae_mod.standardize_latents(vae_mod.vae_encode_batch(ds.mels, vae_params), vae_params)

    ldm_cfg = diffusion.LdmTrainConfig(steps=0, batch_size=cfg.train.ldm_batch,
                                       lr=cfg.train.ldm_finetune_lr,
                                       tuner_lr=cfg.train.ldm_finetune_lr * cfg.train.tuner_lr_scale,
                                       seed=derive_seed(meta["finetune_seed"], "ldm-finetune"),
                                       cond_dropout=cfg.train.cond_dropout)
    state = diffusion.start_ldm_training(model, ldm_cfg, tuner=layer)
    named = [(f"ldm.{n}", p) for n, p in model.named_parameters()]
    if layer is not None and meta["tuner_mode"] == "trainable":
        named += [(f"tuner.{n}", p) for n, p in layer.named_parameters()]
    diffusion.adam_state_from_arrays(state, named, arrays)
    ldm_cfg.steps = total_steps - state.step
    if ldm_cfg.steps < 0:
        raise ConfigError(f"checkpoint already at step {state.step} > total {total_steps}")
    model.train()
    diffusion.train_ldm(latents, conds, stack.sched, ldm_cfg, state, tuner=layer)
    opt_arrays = diffusion.adam_state_to_arrays(state, named)
    path = save_stack(ws.checkpoints / out_name, cfg, encoder, vae_params, model, layer,
                      opt_arrays, stage="finetune", step=state.step,
                      conditioning=meta["conditioning"], class_texts=texts,
                      tuner_mode=meta["tuner_mode"], from_scratch=meta["from_scratch"],
                      finetune_seed=meta["finetune_seed"], lineage=meta["lineage"])
    return path, [float(x) for x in state.loss_history]


# --------------------------------------------------------------------------
# Generation

@dataclass
class CandidateBatch:
    clip_ids: list
    waveforms: list           # Waveform
    embeddings: np.ndarray    # (B, D) unit vectors


def synth_candidates_multi(stack: Stack, plan: list) -> dict:
    """Sample, decode, and vocode candidates for several labels in one pass.

    plan: list of (label, count, seed_base, tag). Candidate i of a label
    derives its noise and phase streams from (seed_base, tag, label, i), so
    results are identical whether labels are synthesized together or one at
    a time; batching across labels only amortizes per-op overhead.
    """
    cfg = stack.cfg
    stft = stack.stft
    conds, seeds, ids, owners = [], [], [], []
    for label, count, seed_base, tag in plan:
        cond = stack.condition_for(label)
        for i in range(count):
            conds.append(cond)
            seeds.append(derive_seed(seed_base, tag, label, i))
            ids.append(f"{label}_{tag}_{i:05d}")
            owners.append(label)
    latents = diffusion.ddpm_sample_batch(
        np.stack(conds), stack.denoiser, stack.sched,
        seeds, stack.cfg.latent_shape(), cfg.schedule.sample_steps)
    latents = vae_mod.destandardize_latents(latents, stack.vae)
    mels = vae_mod.vae_decode_batch(latents, stack.vae)
    natural = n_frames(round(cfg.frontend.duration_s * cfg.frontend.sample_rate), stft)
    # Upper clamp: decoded log-mels from peak-normalized training audio never
    # exceed ~5; an unconverged generator must not overflow the vocoder.
    mels = np.minimum(mels[..., :natural], 6.0)
    voc = vocoder.VocoderConfig(stft, n_iters=cfg.generate.griffinlim_iters)
    waveforms = vocoder.mel_batch_to_wavs(mels, voc, [derive_seed(s, "phase") for s in seeds])
    out_mels = mel_from_samples(np.stack([w.samples for w in waveforms]), stft)
    embeddings = clap.encode_audio_batch(out_mels, stack.encoder)
    out = {}
    for label, _, _, _ in plan:
        take = [j for j, owner in enumerate(owners) if owner == label]
        out[label] = CandidateBatch([ids[j] for j in take], [waveforms[j] for j in take],
                                    embeddings[take])
    return out


def synth_candidates(stack: Stack, label: str, count: int, gen_seed: int,
                     tag: str = "gen") -> CandidateBatch:
    """Single-label convenience wrapper around synth_candidates_multi."""
    return synth_candidates_multi(stack, [(label, count, gen_seed, tag)])[label]


@dataclass
class GenerationResult:
    out_dir: Path
    manifest: corpus.CorpusManifest
    selected: dict            # class -> list of clip ids
    scores: dict              # class -> {candidate id: score}
    embeddings: dict          # class -> {candidate id: embedding}


def generate(stack: Stack, labels: list[str], count: int, seed: int, out_dir, *,
             mode: str = "none", pool_size: int | None = None,
             target_source: str = "tuned_text",
             thresholds: dict | None = None,
             variant_texts: dict | None = None,
             audio_pools: dict | None = None,
             write_wavs: bool = True) -> GenerationResult:
    """Generate `count` clips per label, optionally over-generating a pool of
    pool_size candidates per clip and selecting by cosine score."""
    cfg = stack.cfg
    known = set(corpus.DEFAULT_WRAP_TABLE)
    for label in labels:
        if label not in known:
            raise ConfigError(f"unknown label {label!r}; valid labels: {', '.join(sorted(known))}")
    if mode not in ("none",) + selection.MODES:
        raise ConfigError(f"mode must be none, top1, or threshold; got {mode!r}")
    k = 1 if mode == "none" else (pool_size or cfg.generate.pool_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    policy = selection.SelectionPolicy(pool_size=k, thresholds=thresholds or {},
                                    mode=mode if mode != "none" else "top1",
                                    target_source=target_source if target_source in selection.TARGET_SOURCES else "tuned_text",
                                    seed=seed)
    entries, selected, scores_out, emb_out = [], {}, {}, {}
    batches = synth_candidates_multi(
        stack, [(label, count * k, derive_seed(seed, "generate", label), "gen")
                for label in labels])
    for label in labels:
        batch = batches[label]
        if mode == "none":
            chosen = list(batch.clip_ids)
            cand_scores = {}
        else:
            if target_source == "audio_embedding_pool":
                if not audio_pools or label not in audio_pools:
                    raise ConfigError(f"audio_embedding_pool selection needs a pool for {label!r}")
                targets = list(audio_pools[label])
            elif target_source == "text_variant":
                if not variant_texts or label not in variant_texts:
                    raise ConfigError(f"text_variant selection needs a variant text for {label!r}")
                variants = [v for v in variant_texts[label].split("|")]
                embs = [clap.encode_text(clap.tokenize(v, stack.encoder.vocab), stack.encoder)
                        for v in variants]
                targets = [e / max(float(np.linalg.norm(e)), 1e-12) for e in embs]
            else:
                targets = [stack.scoring_target(label)]
            cand_scores = {}
            candidates = []
            primary = targets[0]
            for cid, w, e in zip(batch.clip_ids, batch.waveforms, batch.embeddings):
                s = float(np.clip(e @ primary, -1.0, 1.0))
                cand_scores[cid] = s
                candidates.append(selection.Candidate(cid, w, e, s))
            if len(targets) > 1:
                chosen = selection.multi_target_select(selection.CandidatePool(candidates), targets,
                                                    policy, count, derive_seed(seed, "multi", label))
            elif mode == "top1":
                chosen = []
                for slot in range(count):
                    pool = selection.CandidatePool(candidates[slot * k:(slot + 1) * k])
                    chosen += selection.select(pool, policy, 1, class_name=label)
            else:
                chosen = selection.select(selection.CandidatePool(candidates), policy, count,
                                       class_name=label)
        selected[label] = chosen
        scores_out[label] = cand_scores
        emb_out[label] = dict(zip(batch.clip_ids, batch.embeddings))
        by_id = dict(zip(batch.clip_ids, batch.waveforms))
        for cid in chosen:
            rel = f"wav/{cid}.wav"
            if write_wavs:
                write_wav(out_dir / rel, by_id[cid])
            entries.append(corpus.ManifestEntry(cid, label, stack.class_text(label), seed, rel))

    manifest = corpus.CorpusManifest("generated", entries, out_dir)
    if write_wavs:
        corpus.save_manifest(manifest)
        if mode != "none":
            _write_scores_sidecar(out_dir / "scores.csv", labels, selected, scores_out, k)
    return GenerationResult(out_dir, manifest, selected, scores_out, emb_out)


def _write_scores_sidecar(path: Path, labels, selected, scores, k: int) -> None:
    """One row per candidate: slot grouping ties each emitted clip to the k
    scores it was chosen from."""
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "slot", "emitted_clip_id", "candidate_clip_id", "score", "selected"])
        for label in labels:
            chosen = set(selected[label])
            cand_ids = sorted(scores[label])
            slot_winner = {}
            for cid in cand_ids:
                slot = int(cid.rsplit("_", 1)[-1]) // k
                if cid in chosen:
                    slot_winner[slot] = cid
            for cid in cand_ids:
                slot = int(cid.rsplit("_", 1)[-1]) // k
                w.writerow([label, slot, slot_winner.get(slot, ""), cid,
                            f"{scores[label][cid]:.6f}", int(cid in chosen)])


# --------------------------------------------------------------------------
# Evaluation

def _extractor_id(stack: Stack) -> str:
    return f"clap-{stack.metadata['config_hash']}"


def manifest_embeddings(manifest: corpus.CorpusManifest, stack: Stack,
                        cache: bool = True) -> tuple[np.ndarray, list]:
    """Audio embeddings for every manifest clip, cached in a container file
    keyed by clip id."""
    cache_path = manifest.root / f"emb_{manifest.split}_{_extractor_id(stack)}.flab"
    if cache and cache_path.exists():
        arrays, _ = load_container(cache_path)
        if all(e.clip_id in arrays for e in manifest.entries):
            return np.stack([arrays[e.clip_id] for e in manifest.entries]), [e.class_name for e in manifest.entries]
    ds = load_mel_dataset(manifest, stack.cfg.frontend)
    embs = clap.encode_audio_batch(ds.mels, stack.encoder)
    if cache:
        save_container(cache_path, dict(zip(ds.clip_ids, embs)),
                       {"extractor": _extractor_id(stack), "split": manifest.split})
    order = {cid: i for i, cid in enumerate(ds.clip_ids)}
    idx = [order[e.clip_id] for e in manifest.entries]
    return embs[idx], [e.class_name for e in manifest.entries]


def group_by_class(embs: np.ndarray, classes: list) -> dict:
    out: dict = {}
    for e, c in zip(embs, classes):
        out.setdefault(c, []).append(e)
    return {c: np.stack(v) for c, v in out.items()}


def evaluate_generated(generated_manifest, reference_manifest, stack: Stack,
                       cache: bool = True) -> fad.FADReport:
    """Per-class and pooled Frechet distances between a generated directory
    and a reference split, using the frozen audio encoder as extractor."""
    if isinstance(generated_manifest, (str, Path)):
        generated_manifest = corpus.load_manifest(generated_manifest)
    if isinstance(reference_manifest, (str, Path)):
        reference_manifest = corpus.load_manifest(reference_manifest)
    g_embs, g_classes = manifest_embeddings(generated_manifest, stack, cache=False)
    r_embs, r_classes = manifest_embeddings(reference_manifest, stack, cache=cache)
    return fad.fad_report(group_by_class(g_embs, g_classes),
                          group_by_class(r_embs, r_classes), _extractor_id(stack))


def evaluate_fad(generated_manifest, reference_manifest, stack: Stack,
                 per_class: bool = True, cache: bool = True) -> fad.FADReport:
    """evaluate_generated with an optional pooled-only view."""
    rep = evaluate_generated(generated_manifest, reference_manifest, stack, cache=cache)
    if not per_class:
        rep.per_class = {}
        rep.n_generated = {}
        rep.n_reference = {}
    return rep
