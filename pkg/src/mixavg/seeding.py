"""Deterministic seed splitting.

Every random stream is addressed by a master seed plus a path of integer or
string keys. Keys are folded into the master seed with the SplitMix64
finalizer, so replicate ``r`` always gets the same stream no matter how many
replicates are generated or in what order.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One SplitMix64 output step applied to ``x`` (mod 2**64)."""
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _MASK


def mix(master_seed: int, *keys) -> int:
    """Fold ``keys`` into ``master_seed``; returns an unsigned 64-bit sub-seed."""
    state = splitmix64(int(master_seed) & _MASK)
    for key in keys:
        state = splitmix64(state ^ _key_to_int(key))
    return state


def rng(master_seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix(master_seed, *keys)))
