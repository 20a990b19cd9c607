"""Seed derivation: every component draws from its own named stream."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> np.random.SeedSequence:
    """A SeedSequence determined by ``seed`` and a path of component names."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        digest = hashlib.sha256(str(name).encode()).digest()
        words.append(int.from_bytes(digest[:8], "little"))
    return np.random.SeedSequence(words)


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *names)))
