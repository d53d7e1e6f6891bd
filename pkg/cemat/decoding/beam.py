"""Beam search over the causal decoder."""

import logging
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np

from cemat.data.vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID
from cemat.decoding.hypothesis import DecodeConfig, Hypothesis
from cemat.model.transformer import EncoderOutput, Transformer
from cemat.tensor import core as T
from cemat.tensor.core import Tensor, no_grad

log = logging.getLogger(__name__)

StepFn = Callable[[List[Tuple[int, ...]]], np.ndarray]


def beam_search_core(
    step_fn: StepFn,
    beam: int,
    max_len: int,
    alpha: float = 1.0,
    eos_id: int = EOS_ID,
    banned: Iterable[int] = (),
) -> Hypothesis:
    """Beam search given next-token log-probabilities.

    `step_fn` maps a list of prefixes to an array of shape
    `(len(prefixes), vocab)`. Candidates are ranked by cumulative score. A
    candidate ending in `eos_id` is finished when fewer than `beam` non-eos
    candidates rank above it; the `beam` best non-eos candidates stay alive.
    Search stops once `beam` hypotheses are finished, none are alive, or
    `max_len` tokens were produced. The best finished hypothesis by
    `score / len ** alpha` is returned; hypotheses cut at `max_len` compete
    unfinished.
    """
    banned = sorted(set(banned))
    alive = [Hypothesis((), (), 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        logprobs = np.array(step_fn([h.tokens for h in alive]), dtype=np.float64)
        if banned:
            logprobs[:, banned] = -np.inf
        vocab = logprobs.shape[1]
        scores = (np.array([h.score for h in alive])[:, None] + logprobs).reshape(-1)
        survivors: List[Hypothesis] = []
        above = 0
        for index in np.argsort(-scores, kind="stable"):
            score = scores[index]
            if not np.isfinite(score):
                break
            row, token = divmod(int(index), vocab)
            parent = alive[row]
            extended = Hypothesis(
                parent.tokens + (token,),
                parent.token_logprobs + (float(logprobs[row, token]),),
                float(score),
                finished=token == eos_id,
            )
            if token == eos_id:
                finished.append(extended)
            else:
                survivors.append(extended)
                above += 1
                if above >= beam:
                    break
        alive = survivors
        if len(finished) >= beam or not alive:
            break
    finished.extend(h for h in alive if len(h.tokens) == max_len)
    if not finished:
        finished = alive
    return max(finished, key=lambda h: h.normalized(alpha))


def _repeat(encoded: EncoderOutput, count: int) -> EncoderOutput:
    return EncoderOutput(
        Tensor(np.repeat(encoded.hidden.data, count, axis=0)),
        np.repeat(encoded.keep, count, axis=0),
    )


def banned_ids(special_ids: Sequence[int]) -> List[int]:
    """Ids never produced by a decoder: every special token except `[eos]` and `[unk]`."""
    return sorted((set(special_ids) | {PAD_ID, BOS_ID, MASK_ID}) - {EOS_ID, UNK_ID})


def beam_search(
    model: Transformer,
    src_ids: Sequence[int],
    tgt_tag: int,
    config: DecodeConfig,
    banned: Iterable[int] = (PAD_ID, BOS_ID, MASK_ID),
) -> Hypothesis:
    """Translate one encoded source sentence; the result excludes the target tag."""
    with no_grad():
        encoded = model.encode(np.array([list(src_ids)]), logits=False)
        limit = min(config.max_len(len(src_ids) - 1), model.config.max_positions - 1)

        def step(prefixes):
            tgt = np.array([[tgt_tag] + list(p) for p in prefixes], dtype=np.int64)
            logits = model.decode_causal(tgt, _repeat(encoded, len(prefixes)))
            return T.log_softmax(logits).data[:, -1, :]

        best = beam_search_core(step, config.beam_size, limit, config.length_penalty, EOS_ID, banned)
    log.debug("Beam search produced %d tokens, score %.4f", len(best), best.score)
    return best
