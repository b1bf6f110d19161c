"""flab: label-conditioned Foley sound generation on a synthetic corpus.

Latent diffusion over mel-VAE latents, conditioned through a contrastive
text/audio embedding space, with transfer learning from audio-embedding to
text-embedding conditioning, a trainable embedding tuning layer, score-based
candidate selection, and Frechet-distance evaluation.
"""

__version__ = "0.1.0"

from .audio import MelSpectrogram, StftConfig, Waveform, wav_to_mel
from .corpus import SoundClassSpec, build_corpus, label_to_text, synth_clip
from .errors import ConfigError, FlabError, InputError, NumericalError
from .fad import EmbeddingStats, FADReport, fit_stats, frechet_distance
from .diffusion import NoiseSchedule, ddpm_sample, make_schedule, q_sample, training_loss
from .tuner import TuningLayer, apply_tuning, init_tuning, tuned_target
from .selection import CandidatePool, SelectionPolicy, multi_target_select, score_candidate, select
from .vae import LatentTensor, VaeParams, gaussian_kl, vae_decode, vae_encode
from .vocoder import VocoderConfig, mel_to_wav
