"""Portable random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a
``SeedSequence(seed, spawn_key=key)``. The same ``(seed, key)`` produces the
same numbers on every platform and numpy >= 1.17, and distinct keys never
share a counter space, so blocks of work can be generated in any order.
"""

from __future__ import annotations

import numpy as np

# stream tags; the first element of every spawn key
NOISE = 1
CHANNEL = 2
SYMBOLS = 3
TRAIN_DATA = 4
SHUFFLE = 5
INIT = 6
FRAME_NOISE = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))
