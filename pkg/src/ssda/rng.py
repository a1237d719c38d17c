"""Keyed reproducible random streams.

All randomness in the package flows through explicit key tuples, so any
component (one sample's augmentation, one batch pass, a weight init) can be
re-derived independently of call order or batch composition.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _hash_str(part: str) -> int:
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _normalize_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            raise ValueError(f"stream key parts must be non-negative, got {value}")
        return value
    if isinstance(part, str):
        return _hash_str(part)
    raise TypeError(f"unsupported stream key part: {part!r}")


def substream(*parts) -> np.random.Generator:
    """Independent generator for a key tuple; identical parts, identical stream.

    Parts are non-negative ints or strings (strings are hashed stably).
    """
    if not parts:
        raise ValueError("substream needs at least one key part")
    entropy = [_normalize_part(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
