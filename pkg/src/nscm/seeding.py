"""Named random sub-streams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stage ``name``; same (seed, name) -> same draws."""
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode())]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
