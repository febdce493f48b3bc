"""Seed derivation: every consumer draws from its own labelled stream."""

import hashlib
from typing import Union

import numpy as np

Label = Union[str, int]


def derive_seed(seed: int, *labels: Label) -> int:
    """Map a root seed plus a label path to an independent 63-bit seed.

    The derivation depends only on (seed, labels), so adding a new consumer never
    shifts the draws of existing ones.
    """
    key = ":".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def rng_for(seed: int, *labels: Label) -> np.random.Generator:
    """A numpy Generator seeded from ``derive_seed(seed, *labels)``."""
    return np.random.default_rng(derive_seed(seed, *labels))
