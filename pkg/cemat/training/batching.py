"""Batches and example streams for training."""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from cemat.data.corpus import CorpusKind, CorpusManifest, SentencePair
from cemat.data.lexicon import Lexicon
from cemat.data.masking import MaskedExample, MaskingPolicy, make_example
from cemat.data.vocab import BalancingPolicy, Vocabulary
from cemat.errors import DataError, UsageError
from cemat.model.transformer import pad_batch
from cemat.utils.seeding import derive_rng

log = logging.getLogger(__name__)

REGIMES = ("both", "bilingual", "monolingual")


@attr.s(auto_attribs=True)
class PretrainBatch:
    """Padded masked examples.

    `*_rows` index the flattened `(batch * length)` hidden states of the
    masked positions; `*_labels` are the original ids there.
    """

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_rows: np.ndarray
    src_labels: np.ndarray
    tgt_rows: np.ndarray
    tgt_labels: np.ndarray

    @property
    def tokens(self) -> int:
        return int((self.src_ids != 0).sum() + (self.tgt_ids != 0).sum())

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def collate_pretrain(examples: Sequence[MaskedExample]) -> PretrainBatch:
    """Pad masked examples into one batch.

    Raises:
        DataError: if an example has no target mask.
    """
    for example in examples:
        if example.needs_resample:
            raise DataError("Example without target masks reached the batcher")
    src_ids = pad_batch([e.src_ids.tolist() for e in examples])
    tgt_ids = pad_batch([e.tgt_ids.tolist() for e in examples])

    def rows(length, positions, labels):
        flat = [b * length + positions[b] for b in range(len(examples))]
        return (
            np.concatenate(flat).astype(np.int64) if flat else np.zeros(0, dtype=np.int64),
            np.concatenate(labels).astype(np.int64) if labels else np.zeros(0, dtype=np.int64),
        )

    src_rows, src_labels = rows(src_ids.shape[1], [e.src_positions for e in examples], [e.src_labels for e in examples])
    tgt_rows, tgt_labels = rows(tgt_ids.shape[1], [e.tgt_positions for e in examples], [e.tgt_labels for e in examples])
    return PretrainBatch(src_ids, tgt_ids, src_rows, src_labels, tgt_rows, tgt_labels)


@attr.s(auto_attribs=True)
class PairBatch:
    """Encoded sentence pairs; both sides start with their language tag."""

    src: List[List[int]]
    tgt: List[List[int]]

    @property
    def tokens(self) -> int:
        return sum(len(s) for s in self.src) + sum(len(t) for t in self.tgt)

    @property
    def size(self) -> int:
        return len(self.src)


def encode_pairs(pairs: Sequence[SentencePair], vocab: Vocabulary) -> PairBatch:
    return PairBatch([vocab.encode(p.src) for p in pairs], [vocab.encode(p.tgt) for p in pairs])


def within_length(pair: SentencePair, vocab: Vocabulary, max_length: int) -> bool:
    """Whether both sides of a pair fit in `max_length` subwords."""
    return vocab.subword_length(pair.src) <= max_length and vocab.subword_length(pair.tgt) <= max_length


def drop_long_pairs(
    pairs: Sequence[SentencePair], vocab: Vocabulary, max_length: int, name: str = "pairs"
) -> List[SentencePair]:
    kept = [pair for pair in pairs if within_length(pair, vocab, max_length)]
    if len(kept) < len(pairs):
        log.info("Dropped %d pairs over %d subwords from %s", len(pairs) - len(kept), max_length, name)
    return kept


class PretrainSource:
    """Stream of masked pre-training examples.

    Corpora are read into memory once. Every example is drawn from its own
    generator derived from `(seed, corpus, line, step, attempt)`, so the
    stream for a given step never depends on what came before it.
    """

    def __init__(
        self,
        manifest: CorpusManifest,
        vocab: Vocabulary,
        lexicon: Optional[Lexicon],
        policy: MaskingPolicy,
        balancing: BalancingPolicy = BalancingPolicy(),
        regime: str = "both",
        seed: int = 1,
        max_length: int = 128,
    ):
        if regime not in REGIMES:
            raise UsageError(f"Unknown data regime {regime}, expected one of {', '.join(REGIMES)}")
        self.vocab = vocab
        self.lexicon = lexicon
        self.policy = policy
        self.seed = seed
        self.max_length = max_length
        kinds = {
            "both": (CorpusKind.BILINGUAL, CorpusKind.MONOLINGUAL),
            "bilingual": (CorpusKind.BILINGUAL,),
            "monolingual": (CorpusKind.MONOLINGUAL,),
        }[regime]
        self.corpora: Dict[str, List[SentencePair]] = {}
        for entry in manifest.select("train"):
            if entry.kind in kinds:
                pairs = drop_long_pairs(list(manifest.pairs(entry, max_length)), vocab, max_length, entry.name)
                if pairs:
                    self.corpora[entry.name] = pairs
        if not self.corpora:
            raise DataError(f"No {regime} training corpora in the manifest")
        self.names = sorted(self.corpora)
        weights = balancing.weights({name: len(pairs) for name, pairs in self.corpora.items()})
        self.weights = np.array([weights[name] for name in self.names])
        log.info(
            "Pre-training source: %s",
            ", ".join(f"{name} ({len(self.corpora[name])}, p={w:.3f})" for name, w in zip(self.names, self.weights)),
        )

    def fits(self, example: MaskedExample) -> bool:
        limit = self.max_length + 1
        return len(example.src_ids) <= limit and len(example.tgt_ids) <= limit

    def example(self, corpus: str, line: int, step: Union[int, str]) -> MaskedExample:
        """Mask one pair, redrawing while the target side has no mask.

        Code-switched words may take more subwords than the originals; draws
        that push the source past `max_length` are redrawn too, and the last
        resort masks the pair without code-switching.
        """
        pair = self.corpora[corpus][line]
        for attempt in range(100):
            rng = derive_rng(self.seed, corpus, line, step, attempt)
            example = make_example(pair, self.vocab, self.lexicon, self.policy, rng)
            if not example.needs_resample and self.fits(example):
                return example
        plain = attr.evolve(self.policy, code_switch=False)
        for attempt in range(100):
            rng = derive_rng(self.seed, corpus, line, step, "plain", attempt)
            example = make_example(pair, self.vocab, None, plain, rng)
            if not example.needs_resample:
                log.debug("Masked %s line %d without code-switching", corpus, line)
                return example
        raise DataError(f"Could not mask a target token in {corpus} line {line}")

    def draw(self, step: Union[int, str], count: int) -> List[Tuple[str, int]]:
        rng = derive_rng(self.seed, "sample", step)
        corpora = rng.choice(len(self.names), size=count, p=self.weights)
        return [(self.names[c], int(rng.integers(len(self.corpora[self.names[c]])))) for c in corpora]

    def batch(self, step: int, batch_tokens: int, micro: int = 0) -> PretrainBatch:
        """Sample examples until the padded batch would exceed `batch_tokens`."""
        key = f"{step}.{micro}"
        examples: List[MaskedExample] = []
        longest = 0
        for corpus, line in self.draw(key, max(1, batch_tokens)):
            example = self.example(corpus, line, key)
            length = max(len(example.src_ids), len(example.tgt_ids))
            if examples and max(longest, length) * (len(examples) + 1) > batch_tokens:
                break
            examples.append(example)
            longest = max(longest, length)
        return collate_pretrain(examples)

    def __iter__(self) -> Iterator[MaskedExample]:
        step = 0
        while True:
            for corpus, line in self.draw(step, 1):
                yield self.example(corpus, line, step)
            step += 1


def load_pairs(
    manifest: CorpusManifest,
    split: str,
    src_lang: Optional[str] = None,
    tgt_lang: Optional[str] = None,
    max_length: int = 128,
) -> List[SentencePair]:
    """Bilingual pairs of a split, optionally restricted to one direction.

    Entries stored in the opposite direction are swapped.
    """
    pairs: List[SentencePair] = []
    for entry in manifest.select(split, CorpusKind.BILINGUAL):
        forward = src_lang in (None, entry.src_lang) and tgt_lang in (None, entry.tgt_lang)
        backward = src_lang == entry.tgt_lang and tgt_lang == entry.src_lang
        if not forward and not backward:
            continue
        for pair in manifest.pairs(entry, max_length):
            pairs.append(pair if forward else SentencePair(pair.tgt, pair.src, pair.origin))
    if not pairs:
        raise DataError(f"No bilingual {split} pairs for {src_lang or '*'}-{tgt_lang or '*'}")
    return pairs


class PairSource:
    """Random batches of encoded sentence pairs for fine-tuning."""

    def __init__(
        self, pairs: Sequence[SentencePair], vocab: Vocabulary, seed: int = 1, max_length: Optional[int] = None
    ):
        if max_length is not None:
            pairs = drop_long_pairs(pairs, vocab, max_length)
            if not pairs:
                raise DataError(f"No fine-tuning pairs within {max_length} subwords")
        self.encoded = encode_pairs(pairs, vocab)
        self.seed = seed

    def __len__(self) -> int:
        return self.encoded.size

    def batch(self, step: int, batch_tokens: int, micro: int = 0) -> PairBatch:
        rng = derive_rng(self.seed, "pairs", step, micro)
        src: List[List[int]] = []
        tgt: List[List[int]] = []
        longest = 0
        for index in rng.permutation(len(self)):
            length = max(len(self.encoded.src[index]), len(self.encoded.tgt[index]) + 1)
            if src and max(longest, length) * (len(src) + 1) > batch_tokens:
                break
            src.append(self.encoded.src[index])
            tgt.append(self.encoded.tgt[index])
            longest = max(longest, length)
        return PairBatch(src, tgt)
