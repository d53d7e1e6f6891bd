"""Corpus module.

Reads bilingual and monolingual plain-text corpora (one sentence per line,
whitespace-separated tokens, UTF-8), attaches language identities and
produces the stream of sentence pairs consumed by the rest of the pipeline.
"""

import enum
import logging
import os
import re
from typing import Collection, Iterable, Iterator, List, Optional, Tuple

import attr
import yaml

from cemat.errors import DataError

log = logging.getLogger(__name__)

PAD = "[pad]"
BOS = "[bos]"
EOS = "[eos]"
MASK = "[mask]"
UNK = "[unk]"
SPECIAL_TOKENS = (PAD, BOS, EOS, MASK, UNK)

DEFAULT_MAX_LENGTH = 128

_LANGUAGE_CODE = re.compile(r"^[a-z0-9]+$")
_TAG_TOKEN = re.compile(r"^\[[a-z0-9]+\]$")


def is_reserved(token: str) -> bool:
    """Special tokens and anything shaped like a language tag are reserved."""
    return token in SPECIAL_TOKENS or bool(_TAG_TOKEN.match(token))


def _check_code(instance, attribute, value):
    if not _LANGUAGE_CODE.match(value or ""):
        raise DataError(f"Invalid language code: {value!r}")


@attr.s(auto_attribs=True, frozen=True)
class LanguageTag:
    code: str = attr.ib(validator=_check_code)

    @property
    def token(self) -> str:
        return f"[{self.code}]"

    def __str__(self) -> str:
        return self.code


def _check_tokens(instance, attribute, value):
    if not value:
        raise DataError("Sentence has no tokens")
    for token in value:
        if not token or any(ch.isspace() for ch in token):
            raise DataError(f"Invalid token {token!r}")
    if instance.tagged and value[0] != instance.lang.token:
        raise DataError(
            f"Tagged sentence must start with {instance.lang.token}, got {value[0]}"
        )


@attr.s(auto_attribs=True, frozen=True)
class Sentence:
    """A sentence in one language.

    `tagged` sentences carry their language-tag token at position 0.
    """

    lang: LanguageTag
    tokens: Tuple[str, ...] = attr.ib(converter=tuple, validator=_check_tokens)
    tagged: bool = False

    @property
    def words(self) -> Tuple[str, ...]:
        """Tokens without the language tag."""
        return self.tokens[1:] if self.tagged else self.tokens

    def __len__(self) -> int:
        return len(self.tokens)


@enum.unique
class Origin(enum.Enum):
    BILINGUAL = "bilingual"
    PSEUDO = "monolingual-pseudo"


def _check_pair(instance, attribute, value):
    if value is Origin.PSEUDO and (
        instance.src.tokens != instance.tgt.tokens
        or instance.src.lang != instance.tgt.lang
    ):
        raise DataError("Pseudo-bilingual pair must have identical sides")


@attr.s(auto_attribs=True, frozen=True)
class SentencePair:
    src: Sentence
    tgt: Sentence
    origin: Origin = attr.ib(default=Origin.BILINGUAL, validator=_check_pair)

    @property
    def is_pseudo(self) -> bool:
        return self.origin is Origin.PSEUDO


@attr.s(auto_attribs=True)
class LoadStats:
    loaded: int = 0
    dropped: int = 0


def _parse_line(line: str, path: str, number: int) -> List[str]:
    tokens = line.strip().split()
    if not tokens:
        raise DataError(f"Empty line in {path} at line {number}")
    for token in tokens:
        if is_reserved(token):
            raise DataError(
                f"Reserved token {token} in {path} at line {number}"
            )
    return tokens


def read_lines(path: str) -> List[str]:
    try:
        with open(path, "r", encoding="utf-8") as file:
            return file.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"File not found: {path}")
    except (PermissionError, OSError) as e:
        raise DataError(f"Unable to read file: {path} ({e})")


def load_parallel(
    src_path: str,
    tgt_path: str,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
    max_length: int = DEFAULT_MAX_LENGTH,
    stats: Optional[LoadStats] = None,
) -> Iterator[SentencePair]:
    """Stream sentence pairs from two aligned files in file order.

    Pairs where either side has more than `max_length` words are dropped and
    counted in `stats`. Each word takes at least one subword, so this is a
    first cut; the subword limit is applied once a vocabulary is loaded.

    Raises:
        DataError: if the files differ in line count or contain an empty line.
    """
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"Line count mismatch: {src_path} has {len(src_lines)} lines, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    stats = stats if stats is not None else LoadStats()
    for number, (src_line, tgt_line) in enumerate(zip(src_lines, tgt_lines), 1):
        src_tokens = _parse_line(src_line, src_path, number)
        tgt_tokens = _parse_line(tgt_line, tgt_path, number)
        if len(src_tokens) > max_length or len(tgt_tokens) > max_length:
            stats.dropped += 1
            continue
        stats.loaded += 1
        yield SentencePair(
            Sentence(src_lang, src_tokens), Sentence(tgt_lang, tgt_tokens)
        )
    if stats.dropped:
        log.info(
            "Dropped %d over-length pairs from %s", stats.dropped, src_path
        )


def load_monolingual(
    path: str,
    lang: LanguageTag,
    max_length: int = DEFAULT_MAX_LENGTH,
    stats: Optional[LoadStats] = None,
) -> Iterator[Sentence]:
    stats = stats if stats is not None else LoadStats()
    for number, line in enumerate(read_lines(path), 1):
        tokens = _parse_line(line, path, number)
        if len(tokens) > max_length:
            stats.dropped += 1
            continue
        stats.loaded += 1
        yield Sentence(lang, tokens)


def monolingual_to_pseudo_pair(sentence: Sentence) -> SentencePair:
    """Copy a monolingual sentence into a pseudo-bilingual pair."""
    return SentencePair(sentence, sentence, Origin.PSEUDO)


def _tag(sentence: Sentence, languages: Collection[str]) -> Sentence:
    if sentence.lang.code not in languages:
        raise DataError(f"Unknown language tag: {sentence.lang.code}")
    if sentence.tagged:
        return sentence
    return Sentence(sentence.lang, (sentence.lang.token,) + sentence.tokens, True)


def prepend_language_token(
    pair: SentencePair, languages: Collection[str]
) -> SentencePair:
    """Prepend the `[xx]` language-tag token to both sides of a pair.

    Args:
        pair (SentencePair): Untagged pair.
        languages (Collection[str]): Known language codes.

    Raises:
        DataError: if a side's language is not in `languages`.
    """
    return SentencePair(
        _tag(pair.src, languages), _tag(pair.tgt, languages), pair.origin
    )


def write_parallel(
    pairs: Iterable[SentencePair], src_path: str, tgt_path: str
) -> int:
    count = 0
    with open(src_path, "w", encoding="utf-8") as src, open(
        tgt_path, "w", encoding="utf-8"
    ) as tgt:
        for pair in pairs:
            src.write(" ".join(pair.src.words) + "\n")
            tgt.write(" ".join(pair.tgt.words) + "\n")
            count += 1
    return count


def write_monolingual(sentences: Iterable[Sentence], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as file:
        for sentence in sentences:
            file.write(" ".join(sentence.words) + "\n")
            count += 1
    return count


def count_lines(path: str) -> int:
    return len(read_lines(path))


@enum.unique
class CorpusKind(enum.Enum):
    BILINGUAL = "bilingual"
    MONOLINGUAL = "monolingual"


@attr.s(auto_attribs=True)
class ManifestEntry:
    src: str
    src_lang: str
    kind: CorpusKind = attr.ib(converter=CorpusKind)
    count: int = attr.ib(converter=int)
    tgt: Optional[str] = None
    tgt_lang: Optional[str] = None
    split: str = "train"

    @property
    def name(self) -> str:
        if self.kind is CorpusKind.BILINGUAL:
            return f"{self.split}.{self.src_lang}-{self.tgt_lang}"
        return f"{self.split}.{self.src_lang}"

    def as_dict(self):
        entry = {
            "src": self.src,
            "tgt": self.tgt,
            "src_lang": self.src_lang,
            "tgt_lang": self.tgt_lang,
            "kind": self.kind.value,
            "count": self.count,
        }
        if self.split != "train":
            entry["split"] = self.split
        return entry


@attr.s(auto_attribs=True)
class CorpusManifest:
    """List of corpora, one YAML mapping per entry.

    Example:
        entries:
          - {src: train.en-xa.en, tgt: train.en-xa.xa, src_lang: en,
             tgt_lang: xa, kind: bilingual, count: 2000}
          - {src: mono.en, tgt: null, src_lang: en, tgt_lang: null,
             kind: monolingual, count: 1000}

    Paths are relative to the manifest's own directory.
    """

    entries: List[ManifestEntry] = attr.ib(factory=list)
    root: str = "."

    @classmethod
    def load(cls, path: str) -> "CorpusManifest":
        try:
            with open(path, "r", encoding="utf-8") as file:
                raw = yaml.safe_load(file) or {}
        except FileNotFoundError:
            raise DataError(f"Manifest not found: {path}")
        except yaml.YAMLError as e:
            raise DataError(f"Malformed manifest {path}: {e}")
        try:
            entries = [ManifestEntry(**entry) for entry in raw.get("entries", [])]
        except (TypeError, ValueError) as e:
            raise DataError(f"Malformed manifest entry in {path}: {e}")
        return cls(entries, os.path.dirname(os.path.abspath(path)))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as file:
            yaml.safe_dump(
                {"entries": [entry.as_dict() for entry in self.entries]},
                file,
                sort_keys=False,
                default_flow_style=None,
            )

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    @property
    def languages(self) -> List[str]:
        langs = set()
        for entry in self.entries:
            langs.add(entry.src_lang)
            if entry.tgt_lang:
                langs.add(entry.tgt_lang)
        return sorted(langs)

    def select(self, split: str = "train", kind: Optional[CorpusKind] = None):
        return [
            entry
            for entry in self.entries
            if entry.split == split and (kind is None or entry.kind is kind)
        ]

    def validate(self) -> None:
        """Check counts against file line counts and language codes."""
        for entry in self.entries:
            _check_code(None, None, entry.src_lang)
            files = [entry.src]
            if entry.kind is CorpusKind.BILINGUAL:
                if not entry.tgt or not entry.tgt_lang:
                    raise DataError(f"Bilingual entry {entry.src} has no target")
                _check_code(None, None, entry.tgt_lang)
                files.append(entry.tgt)
            for name in files:
                lines = count_lines(self.path(name))
                if lines != entry.count:
                    raise DataError(
                        f"Manifest count {entry.count} for {name} "
                        f"does not match {lines} lines"
                    )

    def pairs(
        self,
        entry: ManifestEntry,
        max_length: int = DEFAULT_MAX_LENGTH,
        stats: Optional[LoadStats] = None,
    ) -> Iterator[SentencePair]:
        """Stream an entry as pairs; monolingual entries become pseudo pairs."""
        if entry.kind is CorpusKind.BILINGUAL:
            yield from load_parallel(
                self.path(entry.src),
                self.path(entry.tgt),
                LanguageTag(entry.src_lang),
                LanguageTag(entry.tgt_lang),
                max_length,
                stats,
            )
        else:
            for sentence in load_monolingual(
                self.path(entry.src), LanguageTag(entry.src_lang), max_length, stats
            ):
                yield monolingual_to_pseudo_pair(sentence)
