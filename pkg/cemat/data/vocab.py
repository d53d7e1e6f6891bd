"""Vocabulary module.

A single subword vocabulary shared by every language. Subwords are learned
with greedy pair merges over words split into characters plus an end-of-word
marker, on a sample of sentences drawn with language balancing.

File format (UTF-8, diff-friendly)::

    # cemat-vocab tokens=<N> merges=<M> languages=<en,xa,...>
    <token 0>
    ...
    <token N-1>
    <left> <right>        (M merge rules, in learned order)
"""

import collections
import hashlib
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np

from cemat.data.corpus import (
    BOS,
    EOS,
    MASK,
    PAD,
    SPECIAL_TOKENS,
    UNK,
    CorpusKind,
    CorpusManifest,
    LanguageTag,
    Sentence,
)
from cemat.errors import DataError

log = logging.getLogger(__name__)

END_OF_WORD = "</w>"

PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = range(len(SPECIAL_TOKENS))

Merge = Tuple[str, str]


def _check_temperature(instance, attribute, value):
    if value < 0:
        raise ValueError(f"Balancing temperature must be non-negative, got {value}")


@attr.s(auto_attribs=True, frozen=True)
class BalancingPolicy:
    """Language up/down-sampling, w_i ∝ (n_i / Σn) ** temperature."""

    temperature: float = attr.ib(default=0.7, converter=float, validator=_check_temperature)

    def weights(self, counts: Mapping[str, int]) -> Dict[str, float]:
        names = sorted(name for name, count in counts.items() if count > 0)
        if not names:
            return {}
        sizes = np.array([counts[name] for name in names], dtype=np.float64)
        raw = (sizes / sizes.sum()) ** self.temperature
        raw /= raw.sum()
        return dict(zip(names, raw.tolist()))


def sample_languages(
    policy: BalancingPolicy,
    counts: Mapping[str, int],
    size: int,
    rng: np.random.Generator,
) -> List[str]:
    weights = policy.weights(counts)
    names = list(weights)
    picks = rng.choice(len(names), size=size, p=list(weights.values()))
    return [names[i] for i in picks]


class Vocabulary:
    """Bijection between subword tokens and ids.

    Ids 0-4 are `[pad] [bos] [eos] [mask] [unk]`, followed by one `[xx]` tag per
    language, then subword symbols.
    """

    def __init__(self, tokens: Sequence[str], merges: Sequence[Merge], languages: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("Vocabulary must start with the special tokens")
        self.tokens: List[str] = list(tokens)
        self.ids: Dict[str, int] = {}
        for i, token in enumerate(self.tokens):
            if token in self.ids:
                raise DataError(f"Duplicate vocabulary token: {token}")
            self.ids[token] = i
        self.merges: List[Merge] = [tuple(m) for m in merges]  # type: ignore
        self.ranks: Dict[Merge, int] = {m: i for i, m in enumerate(self.merges)}
        self.languages: List[str] = list(languages)
        for code in self.languages:
            if LanguageTag(code).token not in self.ids:
                raise DataError(f"Language tag [{code}] missing from vocabulary")
        self._cache: Dict[str, List[int]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    mask_id = MASK_ID
    unk_id = UNK_ID

    def tag_id(self, lang) -> int:
        code = lang.code if isinstance(lang, LanguageTag) else lang
        try:
            return self.ids[f"[{code}]"]
        except KeyError:
            raise DataError(f"Unknown language tag: {code}")

    @property
    def tag_ids(self) -> List[int]:
        return [self.tag_id(code) for code in self.languages]

    @property
    def special_ids(self) -> List[int]:
        return list(range(len(SPECIAL_TOKENS))) + self.tag_ids

    @property
    def regular_ids(self) -> np.ndarray:
        """Ids eligible as random replacement tokens."""
        return np.arange(len(SPECIAL_TOKENS) + len(self.languages), len(self.tokens))

    def _segment(self, word: str) -> List[str]:
        symbols = list(word) + [END_OF_WORD]
        while len(symbols) > 1:
            best = None
            for i in range(len(symbols) - 1):
                rank = self.ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, i)
            if best is None:
                break
            i = best[1]
            symbols[i : i + 2] = [symbols[i] + symbols[i + 1]]
        return symbols

    def encode_word(self, word: str) -> List[int]:
        try:
            return self._cache[word]
        except KeyError:
            pieces = [self.ids.get(piece, UNK_ID) for piece in self._segment(word)]
            self._cache[word] = pieces
            return pieces

    def encode(self, sentence: Sentence) -> List[int]:
        """Encode a sentence; the result starts with its language-tag id."""
        ids = [self.tag_id(sentence.lang)]
        for word in sentence.words:
            ids.extend(self.encode_word(word))
        return ids

    def subword_length(self, sentence: Sentence) -> int:
        """Number of subword ids of a sentence, language tag excluded."""
        return sum(len(self.encode_word(word)) for word in sentence.words)

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> Sentence:
        """Rebuild surface tokens from ids.

        The language comes from a leading tag id when there is one. Special
        tokens are dropped when `strip_special` is set, otherwise they come
        back as their own words.

        Raises:
            DataError: on an id outside the vocabulary or an empty result.
        """
        ids = [int(i) for i in ids]
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DataError(f"Unknown token id: {i}")
        lang = None
        tag_ids = set(self.tag_ids)
        if ids and ids[0] in tag_ids:
            lang = LanguageTag(self.tokens[ids[0]][1:-1])
            ids = ids[1:]
        special = set(self.special_ids)
        words: List[str] = []
        current = ""
        for i in ids:
            if i in special:
                if current:
                    words.append(current)
                    current = ""
                if not strip_special:
                    words.append(self.tokens[i])
                continue
            piece = self.tokens[i]
            if piece.endswith(END_OF_WORD):
                words.append(current + piece[: -len(END_OF_WORD)])
                current = ""
            else:
                current += piece
        if current:
            words.append(current)
        if lang is None:
            if not self.languages:
                raise DataError("Cannot decode untagged ids without a language")
            lang = LanguageTag(self.languages[0])
        if not words:
            raise DataError("Decoded sentence is empty")
        return Sentence(lang, words)

    def to_text(self) -> str:
        header = (
            f"# cemat-vocab tokens={len(self.tokens)} merges={len(self.merges)} "
            f"languages={','.join(self.languages)}"
        )
        lines = [header] + self.tokens + [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as file:
            file.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        try:
            with open(path, "r", encoding="utf-8") as file:
                lines = file.read().splitlines()
        except FileNotFoundError:
            raise DataError(f"Vocabulary not found: {path}")
        if not lines or not lines[0].startswith("# cemat-vocab"):
            raise DataError(f"Not a vocabulary file: {path}")
        fields = dict(item.split("=", 1) for item in lines[0].split()[2:])
        n_tokens, n_merges = int(fields["tokens"]), int(fields["merges"])
        languages = [code for code in fields.get("languages", "").split(",") if code]
        tokens = lines[1 : 1 + n_tokens]
        merge_lines = lines[1 + n_tokens : 1 + n_tokens + n_merges]
        if len(tokens) != n_tokens or len(merge_lines) != n_merges:
            raise DataError(f"Truncated vocabulary file: {path}")
        merges = []
        for number, line in enumerate(merge_lines, 2 + n_tokens):
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"Malformed merge rule in {path} at line {number}")
            merges.append((parts[0], parts[1]))
        return cls(tokens, merges, languages)


def _corpus_sentences(
    manifest: CorpusManifest, max_length: int
) -> Dict[str, List[Tuple[str, ...]]]:
    by_lang: Dict[str, List[Tuple[str, ...]]] = collections.defaultdict(list)
    for entry in manifest.select("train"):
        for pair in manifest.pairs(entry, max_length):
            by_lang[pair.src.lang.code].append(pair.src.tokens)
            if entry.kind is CorpusKind.BILINGUAL:
                by_lang[pair.tgt.lang.code].append(pair.tgt.tokens)
    return by_lang


def learn_merges(
    word_counts: Mapping[str, int],
    max_merges: int,
    min_frequency: int = 2,
    forbidden: Iterable[str] = (),
) -> List[Merge]:
    """Greedy pair merging.

    Each round merges the most frequent adjacent symbol pair; ties go to the
    lexicographically smallest pair, which keeps the merge list deterministic.
    """
    words = {tuple(word) + (END_OF_WORD,): count for word, count in word_counts.items()}
    taken = set(forbidden)
    merges: List[Merge] = []
    while len(merges) < max_merges:
        pairs: Dict[Merge, int] = collections.Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        candidates = [
            (-count, pair)
            for pair, count in pairs.items()
            if count >= min_frequency and pair[0] + pair[1] not in taken
        ]
        if not candidates:
            break
        _, best = min(candidates)
        merges.append(best)
        joined = best[0] + best[1]
        taken.add(joined)
        merged_words = {}
        for symbols, count in words.items():
            out: List[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == best:
                    out.append(joined)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            key = tuple(out)
            merged_words[key] = merged_words.get(key, 0) + count
        words = merged_words
    return merges


def learn_vocab(
    manifest: CorpusManifest,
    target_size: int = 4096,
    policy: Optional[BalancingPolicy] = None,
    seed: int = 1,
    sample_size: Optional[int] = None,
    min_frequency: int = 2,
    max_length: int = 128,
) -> Vocabulary:
    """Learn the shared subword vocabulary.

    Every character of the train corpora is a base symbol while the size
    budget allows, sampled or not; merges are learned on the sample.

    Args:
        manifest (CorpusManifest): Corpora; only the train split is read.
        target_size (int): Upper bound on the vocabulary size.
        policy (BalancingPolicy): Language balancing for the learning sample.
        seed (int): Sampling seed.
        sample_size (int, optional): Sentences in the learning sample, defaults
            to the corpus size.

    Raises:
        DataError: if the target size cannot hold the special and tag tokens,
            or if the corpora are empty.
    """
    policy = policy or BalancingPolicy()
    languages = manifest.languages
    reserved = list(SPECIAL_TOKENS) + [LanguageTag(code).token for code in languages]
    if target_size <= len(reserved):
        raise DataError(
            f"Target vocabulary size {target_size} must exceed "
            f"{len(reserved)} special and language tokens"
        )
    by_lang = _corpus_sentences(manifest, max_length)
    counts = {lang: len(sentences) for lang, sentences in by_lang.items()}
    total = sum(counts.values())
    if total == 0:
        raise DataError("Cannot learn a vocabulary from empty corpora")

    rng = np.random.default_rng(seed)
    sample_size = sample_size or total
    word_counts: Dict[str, int] = collections.Counter()
    for lang in sample_languages(policy, counts, sample_size, rng):
        sentences = by_lang[lang]
        for word in sentences[int(rng.integers(len(sentences)))]:
            word_counts[word] += 1

    symbol_counts: Dict[str, int] = collections.Counter()
    for word, count in word_counts.items():
        for ch in word:
            symbol_counts[ch] += count
        symbol_counts[END_OF_WORD] += count
    for sentences in by_lang.values():
        for sentence in sentences:
            for word in sentence:
                for ch in word:
                    symbol_counts[ch] += 0
    budget = target_size - len(reserved)
    base = sorted(symbol_counts, key=lambda s: (-symbol_counts[s], s))[:budget]
    base = [s for s in base if s not in reserved]
    merges = learn_merges(
        word_counts, budget - len(base), min_frequency, forbidden=reserved + base
    )
    tokens = reserved + sorted(base) + [a + b for a, b in merges]
    log.info(
        "Learned vocabulary: %d tokens, %d merges from %d sampled sentences",
        len(tokens),
        len(merges),
        sample_size,
    )
    return Vocabulary(tokens, merges, languages)


__all__ = [
    "BOS",
    "EOS",
    "MASK",
    "PAD",
    "UNK",
    "BalancingPolicy",
    "Vocabulary",
    "learn_vocab",
    "learn_merges",
    "sample_languages",
]
