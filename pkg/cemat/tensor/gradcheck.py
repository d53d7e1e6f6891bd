import logging
from typing import Callable, Dict, List, Sequence, Tuple

import attr
import numpy as np

from cemat.tensor.core import Tensor, backward, precision

log = logging.getLogger(__name__)


@attr.s(auto_attribs=True)
class GradCheckReport:
    probes: int
    max_relative_error: float
    worst: Tuple[str, Tuple[int, ...]]

    @property
    def passed(self) -> bool:
        return self.max_relative_error < 1e-4


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    probes: int = 200,
    h: float = 1e-5,
    rng: np.random.Generator = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    `loss_fn` must rebuild the graph from `params` on every call and be
    deterministic (dropout off). Runs in double precision; the parameters are
    converted to float64 in place.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with precision("double"):
        for tensor in params.values():
            tensor.data = tensor.data.astype(np.float64)
            tensor.grad = None
        backward(loss_fn())
        analytic = {name: t.grad.copy() for name, t in params.items() if t.grad is not None}

        names: Sequence[str] = sorted(analytic)
        sizes = np.array([params[name].data.size for name in names], dtype=np.float64)
        picks: List[Tuple[str, Tuple[int, ...]]] = []
        for _ in range(probes):
            name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
            index = tuple(int(i) for i in np.unravel_index(rng.integers(params[name].data.size), params[name].shape))
            picks.append((name, index))

        worst, worst_error = picks[0], -1.0
        for name, index in picks:
            data = params[name].data
            original = data[index]
            data[index] = original + h
            plus = loss_fn().item()
            data[index] = original - h
            minus = loss_fn().item()
            data[index] = original
            error = relative_error(float(analytic[name][index]), (plus - minus) / (2 * h))
            if error > worst_error:
                worst, worst_error = (name, index), error
    log.info("Gradient check: %d probes, max relative error %.3g at %s%s", probes, worst_error, *worst)
    return GradCheckReport(probes, worst_error, worst)
