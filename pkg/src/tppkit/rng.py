"""Seeded, splittable random number streams.

All stochastic operations in the package draw from Philox counter-based
generators. Streams are derived from an integer seed through a SeedSequence
so that child streams (one per simulated sequence, per fold, per training
step, ...) are independent and reproducible regardless of execution order.
"""

import numpy as np

GENERATOR_NAME = "philox"


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Create a Philox generator from an integer seed or a SeedSequence."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def split(seed: int | np.random.SeedSequence, n: int) -> list[np.random.SeedSequence]:
    """Split a seed into `n` independent child seeds."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return seed.spawn(n)
