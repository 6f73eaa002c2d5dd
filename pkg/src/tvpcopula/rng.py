"""Reproducible random streams.

Every stream is addressed by a key path below the master seed, so the draws a
task sees depend only on *which* task it is, never on scheduling order.
Streams use numpy's counter-based Philox bit generator.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(master_seed: int, *key) -> np.random.Generator:
    """Independent generator for ``key`` (ints or strings) under ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, *key) -> int:
    """A 63-bit integer seed for ``key``; stable across processes and platforms."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_part(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
