"""Deterministic per-batch random streams.

Every Monte Carlo quantity is drawn from a generator keyed by
``(seed, batch_index, stream)``.  Batches are fixed at ``BATCH_SLOTS`` slots,
so a run produces the same numbers whether batches are processed serially,
in parallel, or in a different order.
"""

from enum import IntEnum

import numpy as np

BATCH_SLOTS = 1 << 16


class Stream(IntEnum):
    ALICE_BITS = 1
    ALICE_BASES = 2
    PHOTONS = 3
    CHANNEL = 4
    BOB_BASES = 5
    DETECTOR = 6
    BACKGROUND = 7
    POSTPROC = 8


def batch_rng(seed, batch, stream):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(batch), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def batch_ranges(n_slots):
    """Yield ``(batch_index, start, stop)`` covering ``range(n_slots)``."""
    for b, start in enumerate(range(0, n_slots, BATCH_SLOTS)):
        yield b, start, min(start + BATCH_SLOTS, n_slots)
