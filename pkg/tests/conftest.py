import os

import numpy as np
import pytest
import torch

# Single-threaded torch keeps results reproducible across invocations.
os.environ.setdefault("FLAB_THREADS", "1")
torch.set_num_threads(1)

from flab.audio import StftConfig
from flab.corpus import SoundClassSpec


@pytest.fixture(scope="session")
def tiny_stft() -> StftConfig:
    # Short-clip frontend for fast unit tests.
    return StftConfig(window_len=256, hop=64, n_mels=24, sample_rate=8000,
                      fmin=0.0, fmax=4000.0)


@pytest.fixture(scope="session")
def desk_stft() -> StftConfig:
    return StftConfig()


@pytest.fixture(scope="session")
def tiny_classes() -> list:
    # Three well-separated families, half-second clips.
    return [
        SoundClassSpec("Ping", "tonal_burst",
                       {"f0": (500, 900), "n_harmonics": (1, 2), "rate": (4, 8), "decay_s": (0.02, 0.05)}, 0.5),
        SoundClassSpec("Hiss", "band_noise", {"center": (2200, 3200), "bandwidth": (800, 1600)}, 0.5),
        SoundClassSpec("Thump", "impulse_train",
                       {"rate": (2, 4), "center": (100, 250), "bandwidth": (60, 160), "decay_s": (0.04, 0.09)}, 0.5),
    ]


@pytest.fixture(scope="session")
def tiny_wrap() -> dict:
    return {"Ping": "a short ping", "Hiss": "steady hiss noise", "Thump": "a low thump"}


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
