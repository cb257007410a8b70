"""Seeded random streams.

All randomness goes through :func:`make_rng`, which builds a numpy
``Generator`` on the counter-based Philox-4x64 bit generator keyed by a
``SeedSequence`` over ``(seed, *stream)``. The same key always yields the same
sequence, independent of platform and of how many other streams exist.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for substream ``stream`` (ints or short strings) of ``seed``."""
    ss = np.random.SeedSequence([_word(seed)] + [_word(p) for p in stream])
    return np.random.Generator(np.random.Philox(ss))
