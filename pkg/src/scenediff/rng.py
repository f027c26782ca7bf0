"""Deterministic seed derivation shared by every stochastic component.

All randomness in the package flows from integer seeds.  Child seeds are
derived with ``numpy.random.SeedSequence`` so that independent components
(sampling trajectories, rejection attempts, search expansions) get
decorrelated streams while remaining exactly reproducible.
"""

from __future__ import annotations

import numpy as np

# Seeds are kept within the range accepted by both numpy and torch generators.
_SEED_MOD = 2**63


def derive_seed(seed: int, *path: int) -> int:
    """Derive a child seed from a base seed and an integer path.

    The same ``(seed, *path)`` always yields the same child; distinct paths
    yield statistically independent children.
    """
    ss = np.random.SeedSequence(entropy=int(seed) % _SEED_MOD, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % _SEED_MOD)


def np_rng(seed: int) -> np.random.Generator:
    """A numpy generator seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed) % _SEED_MOD))
