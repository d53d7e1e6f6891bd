"""Seed derivation.

All randomness in cemat flows from numpy Generators derived from a global
seed plus a tuple of identifiers, so a result never depends on how many
workers produced it or on the order work was scheduled in.
"""

import hashlib
from typing import Union

import numpy as np

SeedPart = Union[int, str]


def derive_seed(*parts: SeedPart) -> int:
    """Hash identifiers into a 64-bit seed.

    Example:
        >>> derive_seed(1, "bilingual-0", 42) == derive_seed(1, "bilingual-0", 42)
        True
    """
    digest = hashlib.blake2b(
        "\x1f".join(str(part) for part in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def derive_rng(*parts: SeedPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
