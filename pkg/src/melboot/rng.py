"""Deterministic RNG derivation.

Every stochastic component draws from a Generator derived from (seed, key...)
so results are independent of evaluation order and worker count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng key parts must be int or str, got {type(part).__name__}")


def make_rng(seed: int, *key) -> np.random.Generator:
    """Generator for a namespaced stream, e.g. make_rng(seed, "mask", step)."""
    spawn = tuple(_key_part(p) for p in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn))
