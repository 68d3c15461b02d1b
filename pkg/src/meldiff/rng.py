"""Seeded, splittable random streams.

Every consumer that may run in parallel takes its own child stream, derived
in a fixed order from the parent seed, so results do not depend on how work
is scheduled.
"""
import numpy as np


def make_rng(seed=None):
    if isinstance(seed, np.random.Generator) or hasattr(seed, "standard_normal"):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def spawn(rng, n):
    """``n`` independent child generators of ``rng`` (advances its seed sequence)."""
    return make_rng(rng).spawn(n)
