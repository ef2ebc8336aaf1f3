"""Seeded random streams.

All randomness goes through numpy's Philox, a 64-bit counter-based
generator. Independent streams are keyed by a tuple of integers (seed plus
purpose tags) via ``SeedSequence``, so e.g. the negatives drawn for one anchor
in one epoch never depend on how many draws other anchors made.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    entropy += [tag(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
