"""Synthetic cipher translation task.

English sentences come from a small fragment grammar. Each "foreign"
language is a word-substitution cipher of English, optionally with
adjectives placed after their noun. The substitution tables double as
dictionaries; a share of their entries is withheld so dictionary coverage
stays sparse, as it is for real dictionaries.
"""

import logging
import os
from typing import Dict, List, Sequence, Tuple

import attr
import numpy as np

from cemat.data.corpus import CorpusKind, CorpusManifest, ManifestEntry

log = logging.getLogger(__name__)

DETERMINERS = ["the", "a", "every", "my", "your", "this"]
NOUNS = [
    "cat", "dog", "bird", "child", "teacher", "farmer", "king", "girl", "boy",
    "ball", "book", "apple", "house", "river", "song", "garden", "letter", "horse",
]
ADJECTIVES = ["small", "big", "red", "old", "young", "happy", "quiet", "green", "tall", "dark"]
VERBS = ["sees", "likes", "finds", "takes", "watches", "paints", "brings", "wants", "reads", "hears"]
ADVERBS = ["today", "again", "slowly", "often", "now", "quickly"]
PREPOSITIONS = ["near", "behind", "under", "with"]

ADJ, OTHER = "adj", "other"

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@attr.s(auto_attribs=True, frozen=True)
class CipherLanguage:
    code: str
    table: Dict[str, str]
    adjective_after_noun: bool = False

    def render(self, words: Sequence[Tuple[str, str]]) -> List[str]:
        """Translate a role-annotated English sentence."""
        out = [(self.table[word], role) for word, role in words]
        if self.adjective_after_noun:
            i = 0
            while i < len(out) - 1:
                if out[i][1] == ADJ and out[i + 1][1] != ADJ:
                    out[i], out[i + 1] = out[i + 1], out[i]
                    i += 2
                else:
                    i += 1
        return [word for word, _ in out]


def english_words() -> List[str]:
    return sorted(set(DETERMINERS + NOUNS + ADJECTIVES + VERBS + ADVERBS + PREPOSITIONS))


def make_cipher(code: str, rng: np.random.Generator, adjective_after_noun: bool = False) -> CipherLanguage:
    table: Dict[str, str] = {}
    used = set(english_words())
    for word in english_words():
        while True:
            syllables = int(rng.integers(1, 4))
            cipher = "".join(
                _CONSONANTS[int(rng.integers(len(_CONSONANTS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
                for _ in range(syllables)
            )
            if cipher not in used:
                used.add(cipher)
                table[word] = cipher
                break
    return CipherLanguage(code, table, adjective_after_noun)


def _noun_phrase(rng: np.random.Generator) -> List[Tuple[str, str]]:
    phrase = [(DETERMINERS[int(rng.integers(len(DETERMINERS)))], OTHER)]
    if rng.random() < 0.6:
        phrase.append((ADJECTIVES[int(rng.integers(len(ADJECTIVES)))], ADJ))
    phrase.append((NOUNS[int(rng.integers(len(NOUNS)))], OTHER))
    return phrase


def english_sentence(rng: np.random.Generator) -> List[Tuple[str, str]]:
    words = _noun_phrase(rng)
    words.append((VERBS[int(rng.integers(len(VERBS)))], OTHER))
    words.extend(_noun_phrase(rng))
    if rng.random() < 0.3:
        words.append((PREPOSITIONS[int(rng.integers(len(PREPOSITIONS)))], OTHER))
        words.extend(_noun_phrase(rng))
    if rng.random() < 0.4:
        words.append((ADVERBS[int(rng.integers(len(ADVERBS)))], OTHER))
    return words


@attr.s(auto_attribs=True, frozen=True)
class ToyTaskConfig:
    bilingual: int = attr.ib(default=1500, converter=int)
    monolingual: int = attr.ib(default=500, converter=int)
    finetune: int = attr.ib(default=300, converter=int)
    test: int = attr.ib(default=200, converter=int)
    dictionary_keep: float = attr.ib(default=0.3, converter=float)
    seed: int = attr.ib(default=1, converter=int)


def _write(path: str, sentences: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as file:
        for tokens in sentences:
            file.write(" ".join(tokens) + "\n")


def make_toy_task(directory: str, config: ToyTaskConfig = ToyTaskConfig()) -> CorpusManifest:
    """Write the toy corpora, dictionaries and manifest into `directory`.

    Layout: `<split>.en-<xx>.{en,xx}` bilingual files, `mono.<lang>` files,
    `dict/<src>-<tgt>.txt` dictionaries and `manifest.yaml`.
    """
    rng = np.random.default_rng(config.seed)
    os.makedirs(os.path.join(directory, "dict"), exist_ok=True)
    languages = [make_cipher("xa", rng), make_cipher("xb", rng, adjective_after_noun=True)]

    needed = 2 * config.bilingual + 3 * config.monolingual + config.finetune + config.test
    seen, sentences = set(), []
    for _ in range(needed * 50):
        sentence = english_sentence(rng)
        key = tuple(word for word, _ in sentence)
        if key not in seen:
            seen.add(key)
            sentences.append(sentence)
        if len(sentences) == needed:
            break
    if len(sentences) < needed:
        raise ValueError(f"Grammar produced only {len(sentences)} distinct sentences, {needed} needed")
    order = rng.permutation(len(sentences))
    pool = [sentences[i] for i in order]

    def take(n):
        taken = pool[:n]
        del pool[:n]
        return taken

    english = lambda batch: [[word for word, _ in s] for s in batch]  # noqa: E731
    entries: List[ManifestEntry] = []

    def bilingual(split, lang, batch):
        src_name, tgt_name = f"{split}.en-{lang.code}.en", f"{split}.en-{lang.code}.{lang.code}"
        _write(os.path.join(directory, src_name), english(batch))
        _write(os.path.join(directory, tgt_name), [lang.render(s) for s in batch])
        entries.append(
            ManifestEntry(src_name, "en", CorpusKind.BILINGUAL, len(batch), tgt_name, lang.code, split)
        )

    def monolingual(code, lines):
        name = f"mono.{code}"
        _write(os.path.join(directory, name), lines)
        entries.append(ManifestEntry(name, code, CorpusKind.MONOLINGUAL, len(lines)))

    xa, xb = languages
    bilingual("test", xa, take(config.test))
    bilingual("finetune", xa, take(config.finetune))
    bilingual("train", xa, take(config.bilingual))
    bilingual("train", xb, take(config.bilingual))
    monolingual("en", english(take(config.monolingual)))
    monolingual("xa", [xa.render(s) for s in take(config.monolingual)])
    monolingual("xb", [xb.render(s) for s in take(config.monolingual)])

    words = english_words()
    for lang in languages:
        keep = rng.permutation(len(words))[: int(round(config.dictionary_keep * len(words)))]
        with open(os.path.join(directory, "dict", f"en-{lang.code}.txt"), "w", encoding="utf-8") as file:
            for i in sorted(keep):
                file.write(f"{words[i]} {lang.table[words[i]]}\n")

    manifest = CorpusManifest(entries, os.path.abspath(directory))
    manifest.save(os.path.join(directory, "manifest.yaml"))
    log.info("Wrote toy task with %d corpora to %s", len(entries), directory)
    return manifest
