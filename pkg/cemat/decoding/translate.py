import json
import logging
from typing import List, Optional, Sequence, TextIO

import rich.progress

from cemat.data.corpus import LanguageTag, Sentence
from cemat.data.vocab import EOS_ID, Vocabulary
from cemat.decoding.beam import banned_ids, beam_search
from cemat.decoding.hypothesis import DecodeConfig, Hypothesis
from cemat.decoding.mask_predict import mask_predict
from cemat.errors import DataError, UsageError
from cemat.model.transformer import Transformer

log = logging.getLogger(__name__)

MODES = ("at", "nat")


def surface(vocab: Vocabulary, tokens: Sequence[int], lang: LanguageTag) -> str:
    """Detokenize decoder output up to the first `[eos]`; empty output gives ''."""
    tokens = list(tokens)
    if EOS_ID in tokens:
        tokens = tokens[: tokens.index(EOS_ID)]
    try:
        return " ".join(vocab.decode([vocab.tag_id(lang)] + tokens).words)
    except DataError:
        return ""


def translate(
    model: Transformer,
    vocab: Vocabulary,
    sources: Sequence[Sentence],
    tgt_lang: LanguageTag,
    mode: str,
    config: DecodeConfig,
    references: Optional[Sequence[Sentence]] = None,
    dump: Optional[TextIO] = None,
    progress: bool = False,
) -> List[str]:
    """Translate sentences with beam search (`at`) or Mask-Predict (`nat`).

    Gold length mode reads target lengths from `references`. With `dump`, the
    token state after every Mask-Predict iteration is written as JSON lines.
    """
    if mode not in MODES:
        raise UsageError(f"Unknown decoding mode {mode}")
    if config.length_mode == "gold" and mode == "nat" and references is None:
        raise UsageError("Gold length mode needs reference translations")
    tgt_tag = vocab.tag_id(tgt_lang)
    banned = banned_ids(vocab.special_ids)
    limit = model.config.max_positions
    outputs = []
    for index in rich.progress.track(range(len(sources)), description=f"translate-{mode}", disable=not progress):
        src_ids = vocab.encode(sources[index])
        if len(src_ids) > limit:
            log.warning("Source line %d has %d subwords, truncated to %d", index + 1, len(src_ids), limit)
            src_ids = src_ids[:limit]
        if mode == "at":
            hypothesis = beam_search(model, src_ids, tgt_tag, config, banned)
        else:
            reference_len = len(vocab.encode(references[index])) - 1 if references is not None else None
            hypothesis = mask_predict(model, src_ids, tgt_tag, config, reference_len, banned)
            if dump is not None:
                _dump(dump, index, hypothesis, vocab, tgt_lang)
        outputs.append(surface(vocab, hypothesis.tokens, tgt_lang))
    log.info("Translated %d sentences (%s)", len(outputs), mode)
    return outputs


def _dump(file: TextIO, index: int, hypothesis: Hypothesis, vocab: Vocabulary, lang: LanguageTag) -> None:
    record = {
        "line": index,
        "length": len(hypothesis),
        "iterations": [
            {"iteration": t, "tokens": list(state), "text": " ".join(vocab.tokens[i] for i in state)}
            for t, state in enumerate(hypothesis.history, 1)
        ],
        "output": surface(vocab, hypothesis.tokens, lang),
    }
    file.write(json.dumps(record) + "\n")
