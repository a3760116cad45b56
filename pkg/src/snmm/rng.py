"""Named random streams on a counter-based generator.

Every stream is keyed by ``(seed, *tags)`` so results do not depend on
the order in which streams are created or on which process creates them.
"""

import zlib

import numpy as np


def _tag(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x)


def stream(seed: int, *tags) -> np.random.Generator:
    """Philox generator for the stream named by ``seed`` and ``tags``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_tag(t) for t in tags)])
    return np.random.Generator(np.random.Philox(ss))
