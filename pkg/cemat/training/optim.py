import logging
from typing import Dict, Mapping

import attr
import numpy as np

from cemat.tensor.core import Tensor

log = logging.getLogger(__name__)


def lr_schedule(step: int, peak: float, warmup: int, total: int, power: float = 1.0) -> float:
    """Linear warmup to `peak`, then polynomial decay reaching 0 at `total`.

    Example:
        >>> lr_schedule(400, 5e-4, 400, 20000)
        0.0005
    """
    if step <= 0:
        return 0.0
    if warmup and step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    remaining = 1.0 - (step - warmup) / (total - warmup)
    return peak * remaining ** power


@attr.s(auto_attribs=True)
class Adam:
    """Bias-corrected Adam over named parameters.

    Updates with a non-finite gradient anywhere are skipped entirely and
    counted in `skipped`.
    """

    beta1: float = attr.ib(default=0.9, converter=float)
    beta2: float = attr.ib(default=0.98, converter=float)
    eps: float = attr.ib(default=1e-6, converter=float)
    clip_norm: float = attr.ib(default=0.0, converter=float)
    step: int = 0
    skipped: int = 0
    m: Dict[str, np.ndarray] = attr.ib(factory=dict)
    v: Dict[str, np.ndarray] = attr.ib(factory=dict)

    def apply(self, params: Mapping[str, Tensor], lr: float) -> bool:
        """Apply one update from the accumulated `.grad` of `params`.

        Returns False when the update was skipped.
        """
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("Skipping update %d: non-finite gradient (%d skipped so far)", self.step + 1, self.skipped)
            return False
        if self.clip_norm > 0:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                grads = {name: g * g.dtype.type(factor) for name, g in grads.items()}
        self.step += 1
        correction1 = 1.0 - self.beta1 ** self.step
        correction2 = 1.0 - self.beta2 ** self.step
        for name, grad in grads.items():
            param = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / correction1
            v_hat = v / correction2
            param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.data.dtype)
        return True

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"m.{name}": value for name, value in self.m.items()}
        state.update({f"v.{name}": value for name, value in self.v.items()})
        return state

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], step: int, skipped: int = 0) -> None:
        self.m = {name[2:]: np.array(a) for name, a in arrays.items() if name.startswith("m.")}
        self.v = {name[2:]: np.array(a) for name, a in arrays.items() if name.startswith("v.")}
        self.step = step
        self.skipped = skipped
