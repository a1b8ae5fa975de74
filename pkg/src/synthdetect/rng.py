"""Deterministic random streams.

A single 64-bit experiment seed fans out into named substreams so that
initialization, dropout masks, data shuffling and noise generation each draw
from independent, reproducible sequences regardless of call order.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the (seed, name) substream.

    The same (seed, name) pair always yields the same sequence, on any
    platform. Different names under one seed are statistically independent.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
