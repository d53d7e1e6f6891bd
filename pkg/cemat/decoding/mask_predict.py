"""Mask-Predict decoding for the bidirectional decoder.

Decoding starts from a target of `L` mask tokens. Each iteration predicts
every masked position in parallel, then re-masks the least confident
positions; the number re-masked falls linearly to zero at the last iteration.
"""

import logging
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from cemat.data.vocab import MASK_ID
from cemat.decoding.hypothesis import DecodeConfig, Hypothesis
from cemat.errors import DataError, UsageError
from cemat.model.transformer import EncoderOutput, Transformer
from cemat.tensor import core as T
from cemat.tensor.core import no_grad

log = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]


def remask_schedule(length: int, iterations: int) -> List[int]:
    """Masked count left after each iteration, `floor(L * (T - t) / T)` for t = 1..T."""
    return [length * (iterations - t) // iterations for t in range(1, iterations + 1)]


def mask_predict_core(
    predict_fn: PredictFn,
    length: int,
    iterations: int,
    mask_id: int = MASK_ID,
    banned: Iterable[int] = (),
) -> Hypothesis:
    """Iterative refinement given a function of the current target state.

    `predict_fn` maps the `length` current target ids to log-probabilities of
    shape `(length, vocab)`. A position keeps its token and confidence until it
    is re-masked; ties in confidence re-mask the leftmost position first.

    Raises:
        DataError: if `length` is not positive.
    """
    if length < 1:
        raise DataError(f"Target length must be positive, got {length}")
    if iterations < 1:
        raise UsageError(f"Mask-Predict needs at least one iteration, got {iterations}")
    banned = sorted(set(banned) | {mask_id})
    tokens = np.full(length, mask_id, dtype=np.int64)
    confidence = np.zeros(length)
    masked = np.ones(length, dtype=bool)
    history = []
    for remaining in remask_schedule(length, iterations):
        logprobs = np.array(predict_fn(tokens.copy()), dtype=np.float64)
        logprobs[:, banned] = -np.inf
        best = logprobs.argmax(axis=-1)
        tokens[masked] = best[masked]
        confidence[masked] = logprobs[np.arange(length), best][masked]
        masked[:] = False
        if remaining:
            masked[np.argsort(confidence, kind="stable")[:remaining]] = True
            tokens[masked] = mask_id
        history.append(tuple(int(t) for t in tokens))
    return Hypothesis(
        tuple(int(t) for t in tokens),
        tuple(float(c) for c in confidence),
        float(confidence.sum()),
        finished=True,
        history=tuple(history),
    )


def _predictor(model: Transformer, encoded: EncoderOutput, tgt_tag: int) -> PredictFn:
    def predict(tokens: np.ndarray) -> np.ndarray:
        tgt = np.concatenate([[tgt_tag], tokens])[None, :]
        logits = model.decode_bidirectional(tgt, encoded)
        return T.log_softmax(logits).data[0, 1:, :]

    return predict


def predict_length(
    model: Transformer,
    encoded: EncoderOutput,
    src_len: int,
    config: DecodeConfig,
    reference_len: Optional[int] = None,
) -> List[int]:
    """Target length candidates.

    Gold mode returns the reference length and exists for evaluation only.
    Predicted mode adds the `nat_length_candidates` most likely offsets of the
    length head to the source length; candidates are distinct and positive.

    Raises:
        UsageError: gold mode without a reference length.
    """
    if config.length_mode == "gold":
        if reference_len is None:
            raise UsageError("Gold length mode needs a reference")
        return [int(reference_len)]
    offsets = model.config.length_offsets
    limit = model.config.max_positions - 1
    scores = T.log_softmax(model.length_logits(encoded)).data[0]
    candidates: List[int] = []
    for index in np.argsort(-scores, kind="stable"):
        length = int(min(max(1, src_len + int(index) - offsets), limit))
        if length not in candidates:
            candidates.append(length)
        if len(candidates) == config.nat_length_candidates:
            break
    return candidates


def mask_predict(
    model: Transformer,
    src_ids: Sequence[int],
    tgt_tag: int,
    config: DecodeConfig,
    reference_len: Optional[int] = None,
    banned: Iterable[int] = (),
) -> Hypothesis:
    """Decode every length candidate and keep the best by mean token log-probability."""
    with no_grad():
        encoded = model.encode(np.array([list(src_ids)]), logits=False)
        lengths = predict_length(model, encoded, len(src_ids) - 1, config, reference_len)
        predict = _predictor(model, encoded, tgt_tag)
        hypotheses = [mask_predict_core(predict, length, config.nat_iterations, MASK_ID, banned) for length in lengths]
    best = rerank(hypotheses)
    log.debug("Mask-Predict chose length %d of %s", len(best), lengths)
    return best


def rerank(hypotheses: Sequence[Hypothesis]) -> Hypothesis:
    """The hypothesis with the highest mean token log-probability; earlier wins ties."""
    return max(hypotheses, key=lambda h: h.mean_logprob)
