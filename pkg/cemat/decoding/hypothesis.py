from typing import Tuple

import attr

from cemat.errors import UsageError

LENGTH_MODES = ("gold", "predicted")


@attr.s(auto_attribs=True, frozen=True)
class Hypothesis:
    """Decoded token ids (language tag excluded) with per-token log-probabilities.

    `score` is the plain sum of `token_logprobs`. `history` holds the token
    state after every Mask-Predict iteration.
    """

    tokens: Tuple[int, ...]
    token_logprobs: Tuple[float, ...]
    score: float
    finished: bool = False
    history: Tuple[Tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    def normalized(self, alpha: float) -> float:
        return self.score / max(len(self.tokens), 1) ** alpha

    @property
    def mean_logprob(self) -> float:
        return self.score / max(len(self.tokens), 1)


def _at_least_one(instance, attribute, value):
    if value < 1:
        raise UsageError(f"{attribute.name} must be at least 1, got {value}")


def _check_mode(instance, attribute, value):
    if value not in LENGTH_MODES:
        raise UsageError(f"length_mode must be one of {', '.join(LENGTH_MODES)}, got {value}")


@attr.s(auto_attribs=True, frozen=True)
class DecodeConfig:
    beam_size: int = attr.ib(default=5, converter=int, validator=_at_least_one)
    length_penalty: float = attr.ib(default=1.0, converter=float)
    max_len_ratio: float = attr.ib(default=2.0, converter=float)
    max_len_offset: int = attr.ib(default=10, converter=int)
    nat_iterations: int = attr.ib(default=10, converter=int, validator=_at_least_one)
    nat_length_candidates: int = attr.ib(default=1, converter=int, validator=_at_least_one)
    length_mode: str = attr.ib(default="predicted", validator=_check_mode)

    def max_len(self, src_len: int) -> int:
        return max(1, int(self.max_len_ratio * src_len) + self.max_len_offset)

