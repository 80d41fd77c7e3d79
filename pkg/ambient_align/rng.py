"""
Named random substreams derived from one master seed.
"""

import zlib

import numpy as np


def substream(seed: int, *names: str) -> np.random.Generator:
    """Return a generator keyed by (seed, names).

    The same (seed, names) always yields the same stream regardless of how
    many other streams were drawn before it.
    """
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    keys = [zlib.crc32(name.encode("utf-8")) for name in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))
