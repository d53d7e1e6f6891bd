"""Lexicon module.

Loads MUSE-style bilingual dictionaries (one `source_word target_word` pair
per line, one file per directed language pair named `<src>-<tgt>.txt`),
aligns words between the two sides of a sentence pair and looks up
cross-lingual replacements for code-switching.
"""

import collections
import logging
import os
import re
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

import attr
import numpy as np

from cemat.data.corpus import LanguageTag, SentencePair
from cemat.errors import DataError

log = logging.getLogger(__name__)

_FILE_NAME = re.compile(r"^([a-z0-9]+)-([a-z0-9]+)\.txt$")

LanguagePair = Tuple[str, str]


class Lexicon:
    """Multilingual dictionary.

    Entries are stored per ordered language pair; adding `a -> b` also adds
    the inverse `b -> a`, so lookups work in both directions whichever file
    was loaded.
    """

    def __init__(self):
        self.entries: Dict[LanguagePair, Dict[str, Set[str]]] = collections.defaultdict(
            lambda: collections.defaultdict(set)
        )

    def add(self, src_lang: str, tgt_lang: str, src_word: str, tgt_word: str) -> bool:
        """Add an entry and its inverse; returns False for a duplicate."""
        forward = self.entries[(src_lang, tgt_lang)][src_word]
        if tgt_word in forward:
            return False
        forward.add(tgt_word)
        self.entries[(tgt_lang, src_lang)][tgt_word].add(src_word)
        return True

    @property
    def language_pairs(self) -> List[LanguagePair]:
        return sorted(self.entries)

    def translations(self, word: str, src_lang: str, tgt_lang: str) -> FrozenSet[str]:
        table = self.entries.get((src_lang, tgt_lang))
        if not table or word not in table:
            return frozenset()
        return frozenset(table[word])

    def candidates(self, word: str, src_lang: str) -> List[Tuple[str, str]]:
        """All `(language, translation)` entries of `word` outside `src_lang`."""
        found = []
        for (a, b), table in self.entries.items():
            if a == src_lang and b != src_lang and word in table:
                found.extend((b, translation) for translation in table[word])
        return sorted(found)

    def __len__(self) -> int:
        return sum(
            len(translations)
            for table in self.entries.values()
            for translations in table.values()
        )


def load_lexicon(paths: Mapping[LanguagePair, str]) -> Lexicon:
    """Load dictionaries.

    Args:
        paths (Mapping[LanguagePair, str]): File path per `(src, tgt)` language pair.

    Raises:
        DataError: on a malformed line, naming file and line number.
    """
    lexicon = Lexicon()
    for (src_lang, tgt_lang), path in sorted(paths.items()):
        added = duplicates = 0
        try:
            with open(path, "r", encoding="utf-8") as file:
                lines = file.read().splitlines()
        except FileNotFoundError:
            raise DataError(f"Dictionary not found: {path}")
        for number, line in enumerate(lines, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"Malformed dictionary line in {path} at line {number}")
            if lexicon.add(src_lang, tgt_lang, parts[0], parts[1]):
                added += 1
            else:
                duplicates += 1
        log.info(
            "Loaded %s-%s dictionary: %d entries, %d duplicates",
            src_lang,
            tgt_lang,
            added,
            duplicates,
        )
    return lexicon


def load_lexicon_directory(directory: str) -> Lexicon:
    """Load every `<src>-<tgt>.txt` dictionary in a directory."""
    if not os.path.isdir(directory):
        raise DataError(f"Dictionary directory not found: {directory}")
    paths = {}
    for name in sorted(os.listdir(directory)):
        match = _FILE_NAME.match(name)
        if match:
            paths[(match.group(1), match.group(2))] = os.path.join(directory, name)
    return load_lexicon(paths)


def _check_one_to_one(instance, attribute, value):
    sources = [i for i, _ in value]
    targets = [j for _, j in value]
    if len(set(sources)) != len(sources) or len(set(targets)) != len(targets):
        raise ValueError(f"Alignment is not one-to-one: {sorted(value)}")


@attr.s(auto_attribs=True, frozen=True)
class AlignmentSet:
    """One-to-one word alignment; indices count words, language tags excluded."""

    pairs: FrozenSet[Tuple[int, int]] = attr.ib(
        converter=frozenset, validator=_check_one_to_one, factory=frozenset
    )

    def __iter__(self):
        return iter(sorted(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


def align(
    pair: SentencePair, lexicon: Lexicon, rng: np.random.Generator
) -> AlignmentSet:
    """Align the words of a sentence pair through the dictionary.

    Bilingual pairs: `(i, j)` is a candidate when target word `j` translates
    source word `i`. Candidates are visited in a seeded random order and kept
    unless one of their indices is already used, which yields a maximal
    one-to-one alignment. Pseudo pairs align each word with itself when it has
    any cross-lingual entry.
    """
    src, tgt = pair.src.words, pair.tgt.words
    src_lang, tgt_lang = pair.src.lang.code, pair.tgt.lang.code
    if pair.is_pseudo:
        return AlignmentSet(
            (i, i) for i, word in enumerate(src) if lexicon.candidates(word, src_lang)
        )
    candidates = []
    for i, word in enumerate(src):
        translations = lexicon.translations(word, src_lang, tgt_lang)
        if translations:
            candidates.extend((i, j) for j, other in enumerate(tgt) if other in translations)
    if not candidates:
        return AlignmentSet()
    order = rng.permutation(len(candidates))
    used_src: Set[int] = set()
    used_tgt: Set[int] = set()
    chosen = []
    for k in order:
        i, j = candidates[k]
        if i in used_src or j in used_tgt:
            continue
        used_src.add(i)
        used_tgt.add(j)
        chosen.append((i, j))
    return AlignmentSet(chosen)


def lookup_replacement(
    word: str, src_lang, lexicon: Lexicon, rng: np.random.Generator
) -> Optional[Tuple[LanguageTag, str]]:
    """Pick a translation of `word` in any other language, uniformly at random."""
    code = src_lang.code if isinstance(src_lang, LanguageTag) else src_lang
    candidates = lexicon.candidates(word, code)
    if not candidates:
        return None
    lang, translation = candidates[int(rng.integers(len(candidates)))]
    return LanguageTag(lang), translation


def coverage(alignments: Iterable[AlignmentSet], src_words: int) -> float:
    """Fraction of source words that have an aligned partner."""
    aligned = sum(len(a) for a in alignments)
    return aligned / src_words if src_words else 0.0
