"""Deterministic named random streams.

Every source of randomness in the simulator derives from the experiment seed
plus a purpose tag and integer coordinates (client, task, round, ...), so
results are identical regardless of execution order or parallelism.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, tag: str, *coords: int) -> np.random.Generator:
    """A generator keyed by (seed, tag, coords); stable across runs."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("ascii"))]
    entropy.extend(int(c) & 0xFFFFFFFF for c in coords)
    return np.random.default_rng(np.random.SeedSequence(entropy))
