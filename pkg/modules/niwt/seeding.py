"""
Seed derivation.

Every random stream in a run descends from the single configured seed through
splitmix64, so a stage (or a class inside a stage) gets its own independent
numpy Generator and results do not depend on execution order.
"""
from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 output for ``state``."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _tag_value(tag: Union[str, int]) -> int:
    if isinstance(tag, int):
        return tag & _MASK
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *tags: Union[str, int]) -> int:
    """Child seed of ``seed`` for the stream named by ``tags``."""
    state = splitmix64(int(seed) & _MASK)
    for tag in tags:
        state = splitmix64(state ^ _tag_value(tag))
    return state


def rng(seed: int, *tags: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
