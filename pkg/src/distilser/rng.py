"""Seeded random streams.

All randomness in the package flows from one integer seed through named
sub-streams, so individual components (corpus synthesis, noise mixing,
weight init, batch shuffling) are reproducible in isolation and the
schedule of one component cannot perturb another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng stream key must be str or int, got {type(key).__name__}")


def substream(seed: int, *keys) -> np.random.Generator:
    """Return a generator for the sub-stream named by ``keys`` under ``seed``.

    Keys may be strings (hashed with crc32, stable across platforms and
    runs) or integers (e.g. a record index).
    """
    entropy = (int(seed),) + tuple(_key_to_int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
