"""Seeded random streams.

Every consumer draws from its own PCG64 stream derived from ``(seed, stream)``
so that, e.g., the train/test split never shifts when the weight
initialisation changes.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

STREAMS = {
    "split": 1,
    "init": 2,
    "batch": 3,
    "coverage": 4,
    "images": 5,
    "misc": 6,
}


def _stream_id(stream: str | int) -> int:
    if isinstance(stream, int):
        return stream
    if stream in STREAMS:
        return STREAMS[stream]
    return zlib.crc32(stream.encode()) + 1000


def make_rng(seed: int, stream: str | int = "misc", *extra: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` plus a named stream (and optional sub-indices)."""
    ss = np.random.SeedSequence([int(seed), _stream_id(stream), *map(int, extra)])
    return np.random.Generator(np.random.PCG64(ss))


def env_seed(default: int) -> int:
    """``GROKLAB_SEED`` overrides configured seeds when set."""
    value = os.environ.get("GROKLAB_SEED")
    return int(value) if value not in (None, "") else default
