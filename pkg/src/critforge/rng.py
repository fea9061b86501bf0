"""Named, reproducible random streams.

Every consumer (init, dropout, shuffling, splits, synthetic data) draws from
its own PCG64 stream keyed by ``(seed, name, *extra)``, so adding draws in one
place never shifts another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
