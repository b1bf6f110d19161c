"""Seed derivation and thread configuration helpers.

Every random draw in the package flows through a named seed stream derived
from a root seed plus a tuple of keys (strings or ints). This makes results
independent of batching and execution order: a task's stream depends only on
its own keys.
"""

from __future__ import annotations

import os
import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"seed key must be str or int, got {type(key)!r}")


def seed_sequence(root_seed: int, *keys) -> np.random.SeedSequence:
    # The key count disambiguates trailing zero keys: SeedSequence pads its
    # entropy with zeros, so [r, k] and [r, k, 0] would otherwise collide.
    return np.random.SeedSequence([int(root_seed), len(keys)] + [_key_to_int(k) for k in keys])


def rng_for(root_seed: int, *keys) -> np.random.Generator:
    """Independent generator for the task identified by (root_seed, *keys)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *keys)))


def derive_seed(root_seed: int, *keys) -> int:
    """Collapse a seed stream to a single 31-bit int (for APIs taking one seed)."""
    return int(seed_sequence(root_seed, *keys).generate_state(1)[0] & 0x7FFFFFFF)


def configured_threads() -> int:
    """Worker/thread cap: FLAB_THREADS env var, else the CPU count."""
    env = os.environ.get("FLAB_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("FLAB_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def apply_thread_limits() -> int:
    """Pin torch to the configured thread count; returns the count."""
    n = configured_threads()
    import torch

    torch.set_num_threads(n)
    return n
