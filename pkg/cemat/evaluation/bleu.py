"""Corpus BLEU over whitespace tokens, case preserved."""

import collections
import math
from typing import Counter, List, Sequence, Tuple

import attr

from cemat.errors import DataError

MAX_ORDER = 4


@attr.s(auto_attribs=True, frozen=True)
class BleuReport:
    bleu: float
    precisions: Tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: Tuple[int, ...] = ()
    totals: Tuple[int, ...] = ()

    def as_row(self) -> List[str]:
        return [f"{self.bleu:.2f}"] + [f"{100 * p:.1f}" for p in self.precisions] + [
            f"{self.brevity_penalty:.3f}",
            str(self.hyp_len),
            str(self.ref_len),
        ]


def ngrams(tokens: Sequence[str], order: int) -> Counter:
    return collections.Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    smoothing: bool = True,
    max_order: int = MAX_ORDER,
) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts and brevity penalty.

    Orders for which the hypotheses contain no n-gram at all are left out of
    the geometric mean. With `smoothing`, orders above 1 use add-one counts.

    Raises:
        DataError: if the line counts differ.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hypothesis, reference in zip(hypotheses, references):
        hyp, ref = hypothesis.split(), reference.split()
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts, ref_counts = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n in range(max_order):
        if smoothing and n > 0:
            precisions.append((matches[n] + 1) / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n] if totals[n] else 0.0)
    if hyp_len == 0:
        return BleuReport(0.0, tuple(precisions), 0.0, hyp_len, ref_len, tuple(matches), tuple(totals))

    brevity_penalty = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    orders = [n for n in range(max_order) if totals[n] > 0]
    if any(precisions[n] == 0.0 for n in orders):
        score = 0.0
    else:
        score = 100.0 * brevity_penalty * math.exp(sum(math.log(precisions[n]) for n in orders) / len(orders))
    return BleuReport(
        min(score, 100.0), tuple(precisions), brevity_penalty, hyp_len, ref_len, tuple(matches), tuple(totals)
    )
