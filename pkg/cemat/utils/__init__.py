from cemat.utils.filter import filter
from cemat.utils.seeding import derive_rng, derive_seed

__all__ = ["filter", "derive_rng", "derive_seed"]
