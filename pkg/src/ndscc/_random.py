"""Seeded, partitionable random streams.

Every random draw in the package comes from a Philox counter-based generator
keyed by ``(seed, *stream)``, so results never depend on how work is split
across workers.
"""

import numpy as np

RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10) keyed by SeedSequence(seed, spawn_key=stream)"

# stream tags, first element of every spawn key
STREAM_ENSEMBLE = 1
STREAM_TRACE = 2
STREAM_SCC = 3
STREAM_KMC = 4
STREAM_RELAX = 5
STREAM_SWEEP = 6
STREAM_SURVEY = 7
STREAM_NOISE = 8


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``seed`` and a tuple of stream indices."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    key = tuple(int(s) for s in stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))
