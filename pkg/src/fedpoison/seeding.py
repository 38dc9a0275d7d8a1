"""Deterministic seed derivation for independent RNG streams."""

from __future__ import annotations

import numpy as np


def derive_seed(*keys: int) -> int:
    """Stable scalar seed from a tuple of integer keys.

    Routes the keys through numpy's SeedSequence so distinct tuples give
    independent, platform-stable streams.
    """
    return int(np.random.default_rng(list(keys)).integers(2**31))
