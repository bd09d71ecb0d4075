"""Seed derivation: a fixed 64-bit mixer so that streams do not depend on
execution order."""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _key_int(key) -> int:
    if isinstance(key, str):
        # stable across processes, unlike hash()
        acc = 0xCBF29CE484222325
        for ch in key.encode():
            acc = ((acc ^ ch) * 0x100000001B3) & _MASK
        return acc
    return int(key) & _MASK


def derive_seed(master: int, *keys) -> int:
    """Mix ``master`` with each key in turn; returns a 64-bit integer."""
    s = splitmix64(int(master) & _MASK)
    for k in keys:
        s = splitmix64(s ^ _key_int(k))
    return s


def make_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
