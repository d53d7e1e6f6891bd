"""Masking module.

Two-step masking of a sentence pair:

1. aligned code-switching & masking: aligned source words are replaced by a
   dictionary translation in another language (CSR) and their aligned target
   words are masked (CSM); both are protected from the next step;
2. dual-masking (DM): a per-example ratio of the remaining source and target
   subwords is corrupted with the 80/10/10 mask/keep/random rule.
"""

import json
import math
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import attr
import numpy as np

from cemat.data.corpus import LanguageTag, Origin, SentencePair
from cemat.data.lexicon import AlignmentSet, Lexicon, align, lookup_replacement
from cemat.data.vocab import MASK_ID, Vocabulary
from cemat.utils.converters import to_bool, to_floats, to_range

Range = Tuple[float, float]

MASK, KEEP, RANDOM = range(3)


def _check_ratio(instance, attribute, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{attribute.name} must be in [0, 1], got {value}")


def _check_range(instance, attribute, value):
    low, high = value
    if not 0.0 <= low <= high <= 1.0:
        raise ValueError(f"{attribute.name} must be an ordered range in [0, 1], got {value}")


def _check_split(instance, attribute, value):
    if len(value) != 3 or min(value) < 0 or abs(sum(value) - 1.0) > 1e-9:
        raise ValueError(f"Corruption split must be three shares summing to 1, got {value}")


@attr.s(auto_attribs=True, frozen=True)
class MaskingPolicy:
    cs_ratio_bilingual: float = attr.ib(default=0.15, converter=float, validator=_check_ratio)
    cs_ratio_mono: float = attr.ib(default=0.30, converter=float, validator=_check_ratio)
    dm_tgt_range_bilingual: Range = attr.ib(default=(0.2, 0.5), converter=to_range, validator=_check_range)
    dm_src_range_bilingual: Range = attr.ib(default=(0.1, 0.2), converter=to_range, validator=_check_range)
    dm_range_mono: Range = attr.ib(default=(0.3, 0.4), converter=to_range, validator=_check_range)
    corruption: Tuple[float, float, float] = attr.ib(
        default=(0.8, 0.1, 0.1),
        converter=to_floats,
        validator=_check_split,
    )
    dynamic: bool = attr.ib(default=True, converter=to_bool)
    fixed_ratio: float = attr.ib(default=0.15, converter=float, validator=_check_ratio)
    code_switch: bool = attr.ib(default=True, converter=to_bool)


@attr.s(auto_attribs=True, frozen=True)
class CodeSwitch:
    """A pair after CSR and CSM, still at word level.

    Masked target words read `[mask]`; `tgt_labels` keeps their original form.
    """

    src_lang: LanguageTag
    tgt_lang: LanguageTag
    src_words: Tuple[str, ...]
    tgt_words: Tuple[str, ...]
    origin: Origin
    src_positions: FrozenSet[int] = frozenset()
    tgt_positions: FrozenSet[int] = frozenset()
    tgt_labels: Dict[int, str] = attr.ib(factory=dict)
    replacements: Dict[int, Tuple[str, str]] = attr.ib(factory=dict)


def apply_cs(
    pair: SentencePair,
    alignment: AlignmentSet,
    lexicon: Lexicon,
    policy: MaskingPolicy,
    rng: np.random.Generator,
) -> CodeSwitch:
    """Aligned code-switching & masking.

    A random subset of the alignment is visited; at most
    ceil(ratio * |source words|) source words are replaced, the ratio being
    `cs_ratio_mono` for pseudo pairs and `cs_ratio_bilingual` otherwise. Aligned
    pairs whose source word has no replacement are skipped.
    """
    src, tgt = list(pair.src.words), list(pair.tgt.words)
    ratio = policy.cs_ratio_mono if pair.is_pseudo else policy.cs_ratio_bilingual
    budget = math.ceil(ratio * len(src))
    links = list(alignment)
    src_positions, tgt_positions = set(), set()
    labels, replacements = {}, {}
    if links and budget:
        for k in rng.permutation(len(links)):
            if len(src_positions) >= budget:
                break
            i, j = links[k]
            found = lookup_replacement(src[i], pair.src.lang, lexicon, rng)
            if found is None:
                continue
            lang, word = found
            replacements[i] = (lang.code, word)
            labels[j] = tgt[j]
            src[i] = word
            tgt[j] = "[mask]"
            src_positions.add(i)
            tgt_positions.add(j)
    return CodeSwitch(
        pair.src.lang,
        pair.tgt.lang,
        tuple(src),
        tuple(tgt),
        pair.origin,
        frozenset(src_positions),
        frozenset(tgt_positions),
        labels,
        replacements,
    )


@attr.s(auto_attribs=True)
class EncodedPair:
    """Subword ids of a code-switched pair; position 0 holds the language tag."""

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    origin: Origin
    src_protected: FrozenSet[int] = frozenset()
    tgt_protected: FrozenSet[int] = frozenset()
    tgt_labels: Dict[int, int] = attr.ib(factory=dict)
    src_words: int = 0
    cs_words: int = 0


def encode_code_switched(switched: CodeSwitch, vocab: Vocabulary) -> EncodedPair:
    src_ids = [vocab.tag_id(switched.src_lang)]
    src_protected = set()
    for i, word in enumerate(switched.src_words):
        pieces = vocab.encode_word(word)
        if i in switched.src_positions:
            src_protected.update(range(len(src_ids), len(src_ids) + len(pieces)))
        src_ids.extend(pieces)
    tgt_ids = [vocab.tag_id(switched.tgt_lang)]
    tgt_protected = set()
    labels = {}
    for j, word in enumerate(switched.tgt_words):
        if j in switched.tgt_positions:
            for piece in vocab.encode_word(switched.tgt_labels[j]):
                labels[len(tgt_ids)] = piece
                tgt_protected.add(len(tgt_ids))
                tgt_ids.append(MASK_ID)
        else:
            tgt_ids.extend(vocab.encode_word(word))
    return EncodedPair(
        np.array(src_ids, dtype=np.int64),
        np.array(tgt_ids, dtype=np.int64),
        switched.origin,
        frozenset(src_protected),
        frozenset(tgt_protected),
        labels,
        len(switched.src_words),
        len(switched.src_positions),
    )


@attr.s(auto_attribs=True)
class MaskedExample:
    """Final training example.

    `tgt_positions`/`tgt_labels` cover both CSM and DM masks; `src_positions`/
    `src_labels` are the DM-selected source positions. For pseudo pairs the
    DM-selected source and target positions are the same index set.
    """

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_positions: np.ndarray
    src_labels: np.ndarray
    tgt_positions: np.ndarray
    tgt_labels: np.ndarray
    origin: Origin
    cs_src_positions: FrozenSet[int] = frozenset()
    cs_tgt_positions: FrozenSet[int] = frozenset()
    dm_src_positions: Tuple[int, ...] = ()
    dm_tgt_positions: Tuple[int, ...] = ()
    upsilon: float = 0.0
    mu: float = 0.0
    corruption: Tuple[int, int, int] = (0, 0, 0)
    src_words: int = 0
    cs_words: int = 0

    @property
    def needs_resample(self) -> bool:
        return self.tgt_positions.size == 0

    @property
    def is_pseudo(self) -> bool:
        return self.origin is Origin.PSEUDO

    def restore_cs_stage(self) -> Tuple[np.ndarray, np.ndarray]:
        """Undo the dual-masking corruption using the stored labels."""
        src, tgt = self.src_ids.copy(), self.tgt_ids.copy()
        src[self.src_positions] = self.src_labels
        dm = np.isin(self.tgt_positions, list(self.dm_tgt_positions))
        tgt[self.tgt_positions[dm]] = self.tgt_labels[dm]
        return src, tgt

    def check(self) -> None:
        """Assert the example's structural invariants."""
        dm_src, dm_tgt = set(self.dm_src_positions), set(self.dm_tgt_positions)
        assert not dm_src & self.cs_src_positions, "CS source position DM-selected"
        assert not dm_tgt & self.cs_tgt_positions, "CS target position DM-selected"
        assert 0 not in dm_src | dm_tgt | self.cs_src_positions | self.cs_tgt_positions
        assert len(self.src_positions) == len(self.src_labels)
        assert len(self.tgt_positions) == len(self.tgt_labels)
        assert set(self.tgt_positions.tolist()) == dm_tgt | self.cs_tgt_positions
        if self.is_pseudo:
            assert self.upsilon == self.mu
            assert self.dm_src_positions == self.dm_tgt_positions, "Pseudo pair DM index sets differ"
        else:
            assert self.upsilon >= self.mu

    def to_record(self) -> str:
        return json.dumps(
            {
                "origin": self.origin.value,
                "src_ids": self.src_ids.tolist(),
                "tgt_ids": self.tgt_ids.tolist(),
                "src_positions": self.src_positions.tolist(),
                "src_labels": self.src_labels.tolist(),
                "tgt_positions": self.tgt_positions.tolist(),
                "tgt_labels": self.tgt_labels.tolist(),
                "cs_src_positions": sorted(self.cs_src_positions),
                "cs_tgt_positions": sorted(self.cs_tgt_positions),
                "dm_src_positions": list(self.dm_src_positions),
                "dm_tgt_positions": list(self.dm_tgt_positions),
                "upsilon": self.upsilon,
                "mu": self.mu,
                "corruption": list(self.corruption),
                "src_words": self.src_words,
                "cs_words": self.cs_words,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_record(cls, record: str) -> "MaskedExample":
        raw = json.loads(record)
        ints = lambda key: np.array(raw[key], dtype=np.int64)  # noqa: E731
        return cls(
            src_ids=ints("src_ids"),
            tgt_ids=ints("tgt_ids"),
            src_positions=ints("src_positions"),
            src_labels=ints("src_labels"),
            tgt_positions=ints("tgt_positions"),
            tgt_labels=ints("tgt_labels"),
            origin=Origin(raw["origin"]),
            cs_src_positions=frozenset(raw["cs_src_positions"]),
            cs_tgt_positions=frozenset(raw["cs_tgt_positions"]),
            dm_src_positions=tuple(raw["dm_src_positions"]),
            dm_tgt_positions=tuple(raw["dm_tgt_positions"]),
            upsilon=raw["upsilon"],
            mu=raw["mu"],
            corruption=tuple(raw["corruption"]),
            src_words=raw["src_words"],
            cs_words=raw["cs_words"],
        )


def _count(ratio: float, eligible: int, at_least_one: bool) -> int:
    n = int(math.floor(ratio * eligible))
    if n == 0 and at_least_one and eligible:
        n = 1
    return n


def _select(eligible: Sequence[int], n: int, rng: np.random.Generator) -> List[int]:
    if n == 0:
        return []
    return sorted(int(i) for i in rng.choice(len(eligible), size=n, replace=False))


def _outcomes(n: int, policy: MaskingPolicy, regular_ids: np.ndarray, rng: np.random.Generator):
    draws = rng.random(n)
    kinds = np.where(
        draws < policy.corruption[0],
        MASK,
        np.where(draws < policy.corruption[0] + policy.corruption[1], KEEP, RANDOM),
    )
    tokens = rng.choice(regular_ids, size=n) if n else np.zeros(0, dtype=np.int64)
    return kinds, tokens


def _corrupt(ids: np.ndarray, positions: Sequence[int], kinds, tokens) -> None:
    for position, kind, token in zip(positions, kinds, tokens):
        if kind == MASK:
            ids[position] = MASK_ID
        elif kind == RANDOM:
            ids[position] = token


def _draw_bilingual(policy: MaskingPolicy, rng: np.random.Generator) -> Tuple[float, float]:
    if not policy.dynamic:
        return policy.fixed_ratio, policy.fixed_ratio
    for _ in range(100):
        upsilon = float(rng.uniform(*policy.dm_tgt_range_bilingual))
        mu = float(rng.uniform(*policy.dm_src_range_bilingual))
        if upsilon >= mu:
            return upsilon, mu
    raise ValueError("Target masking range never exceeds the source range")


def apply_dm(
    encoded: EncodedPair,
    policy: MaskingPolicy,
    regular_ids: np.ndarray,
    rng: np.random.Generator,
) -> MaskedExample:
    """Dynamic dual-masking of an encoded, code-switched pair.

    Protected (code-switched) positions and the language tag are never
    selected. Pseudo pairs mask one index set on both sides with the same
    outcome, drawn from the positions unprotected on both sides.
    """
    src, tgt = encoded.src_ids.copy(), encoded.tgt_ids.copy()
    src_eligible = [p for p in range(1, len(src)) if p not in encoded.src_protected]
    tgt_eligible = [p for p in range(1, len(tgt)) if p not in encoded.tgt_protected]
    corruption = np.zeros(3, dtype=np.int64)

    if encoded.origin is Origin.PSEUDO:
        shared = sorted(set(src_eligible) & set(tgt_eligible))
        if policy.dynamic:
            ratio = float(rng.uniform(*policy.dm_range_mono))
        else:
            ratio = policy.fixed_ratio
        upsilon = mu = ratio
        chosen = _select(shared, _count(ratio, len(shared), True), rng)
        src_selected = tgt_selected = [shared[s] for s in chosen]
        kinds, tokens = _outcomes(len(chosen), policy, regular_ids, rng)
        src_labels = src[src_selected]
        _corrupt(src, src_selected, kinds, tokens)
        dm_tgt_labels = tgt[tgt_selected]
        _corrupt(tgt, tgt_selected, kinds, tokens)
        corruption += np.bincount(kinds, minlength=3)
    else:
        upsilon, mu = _draw_bilingual(policy, rng)
        tgt_chosen = _select(tgt_eligible, _count(upsilon, len(tgt_eligible), True), rng)
        src_chosen = _select(src_eligible, _count(mu, len(src_eligible), False), rng)
        tgt_selected = [tgt_eligible[s] for s in tgt_chosen]
        src_selected = [src_eligible[s] for s in src_chosen]
        tgt_kinds, tgt_tokens = _outcomes(len(tgt_selected), policy, regular_ids, rng)
        src_kinds, src_tokens = _outcomes(len(src_selected), policy, regular_ids, rng)
        dm_tgt_labels = tgt[tgt_selected]
        _corrupt(tgt, tgt_selected, tgt_kinds, tgt_tokens)
        src_labels = src[src_selected]
        _corrupt(src, src_selected, src_kinds, src_tokens)
        corruption += np.bincount(tgt_kinds, minlength=3) + np.bincount(src_kinds, minlength=3)

    labels = dict(encoded.tgt_labels)
    labels.update(zip(tgt_selected, dm_tgt_labels.tolist()))
    tgt_positions = np.array(sorted(labels), dtype=np.int64)
    return MaskedExample(
        src_ids=src,
        tgt_ids=tgt,
        src_positions=np.array(src_selected, dtype=np.int64),
        src_labels=np.asarray(src_labels, dtype=np.int64),
        tgt_positions=tgt_positions,
        tgt_labels=np.array([labels[p] for p in tgt_positions.tolist()], dtype=np.int64),
        origin=encoded.origin,
        cs_src_positions=encoded.src_protected,
        cs_tgt_positions=encoded.tgt_protected,
        dm_src_positions=tuple(src_selected),
        dm_tgt_positions=tuple(tgt_selected),
        upsilon=upsilon,
        mu=mu,
        corruption=tuple(int(c) for c in corruption),
        src_words=encoded.src_words,
        cs_words=encoded.cs_words,
    )


def make_example(
    pair: SentencePair,
    vocab: Vocabulary,
    lexicon: Optional[Lexicon],
    policy: MaskingPolicy,
    rng: np.random.Generator,
) -> MaskedExample:
    """align -> apply_cs -> apply_dm on one pair."""
    if policy.code_switch and lexicon is not None:
        alignment = align(pair, lexicon, rng)
    else:
        alignment = AlignmentSet()
    switched = apply_cs(pair, alignment, lexicon or Lexicon(), policy, rng)
    encoded = encode_code_switched(switched, vocab)
    return apply_dm(encoded, policy, vocab.regular_ids, rng)


@attr.s(auto_attribs=True)
class MaskingStats:
    """Running statistics over masked examples for the `stats` report."""

    examples: int = 0
    zero_target: int = 0
    src_words: int = 0
    cs_words: int = 0
    corruption: np.ndarray = attr.ib(factory=lambda: np.zeros(3, dtype=np.int64))
    upsilons: List[float] = attr.ib(factory=list)
    mus: List[float] = attr.ib(factory=list)

    def add(self, example: MaskedExample) -> None:
        self.examples += 1
        self.zero_target += int(example.needs_resample)
        self.src_words += example.src_words
        self.cs_words += example.cs_words
        self.corruption += np.asarray(example.corruption)
        self.upsilons.append(example.upsilon)
        self.mus.append(example.mu)

    @property
    def cs_coverage(self) -> float:
        return self.cs_words / self.src_words if self.src_words else 0.0

    @property
    def corruption_split(self) -> Tuple[float, float, float]:
        total = self.corruption.sum()
        if not total:
            return (0.0, 0.0, 0.0)
        return tuple(float(c) / total for c in self.corruption)  # type: ignore

    def histogram(self, values: Sequence[float], bins: int = 10) -> Tuple[np.ndarray, np.ndarray]:
        return np.histogram(np.asarray(values), bins=bins, range=(0.0, 1.0))
