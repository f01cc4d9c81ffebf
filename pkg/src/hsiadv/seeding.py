"""Deterministic RNG derivation.

Every random draw in the package comes from ``numpy.random.default_rng`` seeded
through :func:`derive_rng` with a purpose code plus context keys (example index,
iteration, copy index, ...).  Two runs with the same top-level seed therefore
produce identical results regardless of worker count or evaluation order.
"""

from __future__ import annotations

import numpy as np

# Purpose codes. Values are part of the reproducibility contract; do not reorder.
SCENE = 1
PATCHES = 2
SPLIT = 3
TRAIN = 4
ATTACK = 5
TRANSFORM = 6
DEFENSE = 7


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a Generator keyed on (seed, *keys)."""
    entropy = (int(seed),) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: int) -> int:
    """Collapse (seed, *keys) into a single child seed (for nested derivation)."""
    entropy = (int(seed),) + tuple(int(k) for k in keys)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
