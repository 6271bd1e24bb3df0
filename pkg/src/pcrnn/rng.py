"""Seed handling.

Every random stream is a Philox (counter-based) generator keyed by
``SeedSequence([seed, *stream])``. A command receives one 64-bit seed; the
stream words name what the randomness is for, so a sweep run ``i`` uses
``make_rng(seed, SIM_STREAM, i)`` regardless of execution order.
"""
from __future__ import annotations

import numpy as np

INIT_STREAM = 0
SIM_STREAM = 1
CHECK_STREAM = 2


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))
