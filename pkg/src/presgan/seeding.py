"""Named random streams derived from one integer seed.

Every stream key has the same length, so keys that differ only by trailing
zeros cannot map to the same entropy pool.
"""
from __future__ import annotations

import numpy as np

SHUFFLE = 1
ITERATION = 2
INIT = 3
DATA = 4
EVAL = 5
SAMPLE = 6


def stream(seed: int, tag: int, i: int = 0, j: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([tag, int(seed), int(i), int(j)])
