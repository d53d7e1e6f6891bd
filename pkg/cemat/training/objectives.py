"""Training objectives.

Each objective turns a batch into `LossInputs` (padded decoder inputs and the
rows and labels to score) and computes a scalar loss from them. Losses are
normalized per scored token; when gradients are accumulated over several
micro-batches the normalizer is the token count of the whole update, passed
as `totals`.
"""

from abc import ABC, abstractmethod
from typing import Dict, Optional, Union

import attr
import numpy as np

from cemat.data.vocab import EOS_ID, MASK_ID, PAD_ID
from cemat.errors import UsageError
from cemat.model.transformer import Transformer, pad_batch
from cemat.tensor import core as T
from cemat.tensor.core import Tensor
from cemat.training.batching import PairBatch, PretrainBatch

Batch = Union[PretrainBatch, PairBatch]


@attr.s(auto_attribs=True)
class LossInputs:
    src_ids: np.ndarray
    tgt_ids: np.ndarray
    tgt_rows: np.ndarray
    tgt_labels: np.ndarray
    src_rows: Optional[np.ndarray] = None
    src_labels: Optional[np.ndarray] = None
    length_labels: Optional[np.ndarray] = None

    @property
    def counts(self) -> Dict[str, int]:
        counts = {"tgt": int(self.tgt_rows.size), "sentences": int(self.src_ids.shape[0])}
        if self.src_rows is not None:
            counts["src"] = int(self.src_rows.size)
        return counts

    @property
    def tokens(self) -> int:
        return int((self.src_ids != PAD_ID).sum() + (self.tgt_ids != PAD_ID).sum())


@attr.s(auto_attribs=True)
class LossOutput:
    loss: Tensor
    components: Dict[str, float]
    counts: Dict[str, int]


def _rows(hidden: Tensor, rows: np.ndarray) -> Tensor:
    batch, length, dim = hidden.shape
    return T.take_rows(T.reshape(hidden, (batch * length, dim)), rows)


def _normalized(total: Tensor, count: int) -> Tensor:
    return T.scale(total, 1.0 / count) if count else T.scale(total, 0.0)


def pretrain_inputs(batch: PretrainBatch) -> LossInputs:
    return LossInputs(
        batch.src_ids, batch.tgt_ids, batch.tgt_rows, batch.tgt_labels, batch.src_rows, batch.src_labels
    )


def pretrain_loss(
    model: Transformer,
    inputs: LossInputs,
    lam: float = 0.7,
    label_smoothing: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    totals: Optional[Dict[str, int]] = None,
) -> LossOutput:
    """Joint objective `lam * cmlm + (1 - lam) * mlm`.

    `cmlm` is the decoder's negative log-likelihood at masked target positions,
    `mlm` the encoder's at masked source positions, each per masked token.
    """
    totals = totals or inputs.counts
    encoded = model.encode(inputs.src_ids, train, rng, logits=False)
    mlm_logits = model.project(_rows(encoded.hidden, inputs.src_rows), "mlm")
    mlm = _normalized(T.cross_entropy(mlm_logits, inputs.src_labels, label_smoothing, "sum"), totals.get("src", 0))
    decoded = model.decoder_states(inputs.tgt_ids, encoded, causal=False, train=train, rng=rng)
    cmlm_logits = model.project(_rows(decoded, inputs.tgt_rows), "cmlm")
    cmlm = _normalized(T.cross_entropy(cmlm_logits, inputs.tgt_labels, label_smoothing, "sum"), totals["tgt"])
    loss = T.add(T.scale(cmlm, lam), T.scale(mlm, 1.0 - lam))
    return LossOutput(loss, {"cmlm": cmlm.item(), "mlm": mlm.item()}, inputs.counts)


def at_inputs(batch: PairBatch) -> LossInputs:
    """Teacher forcing: the decoder reads `[tag] w1 .. wn` and predicts `w1 .. wn [eos]`.

    The target language tag doubles as the begin-of-sentence token.
    """
    src_ids = pad_batch(batch.src)
    tgt_ids = pad_batch(batch.tgt)
    labels = pad_batch([t[1:] + [EOS_ID] for t in batch.tgt], tgt_ids.shape[1])
    rows = np.flatnonzero(tgt_ids.reshape(-1) != PAD_ID)
    return LossInputs(src_ids, tgt_ids, rows, labels.reshape(-1)[rows])


def at_loss(
    model: Transformer,
    inputs: LossInputs,
    label_smoothing: float = 0.2,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    totals: Optional[Dict[str, int]] = None,
) -> LossOutput:
    totals = totals or inputs.counts
    encoded = model.encode(inputs.src_ids, train, rng, logits=False)
    decoded = model.decoder_states(inputs.tgt_ids, encoded, causal=True, train=train, rng=rng)
    logits = model.project(_rows(decoded, inputs.tgt_rows), "cmlm")
    loss = _normalized(T.cross_entropy(logits, inputs.tgt_labels, label_smoothing, "sum"), totals["tgt"])
    return LossOutput(loss, {"nll": loss.item()}, inputs.counts)


def nat_mask_positions(length: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k ~ U{1..length} and mask k distinct word positions (1-based, the tag sits at 0)."""
    k = int(rng.integers(1, length + 1))
    return np.sort(rng.choice(length, size=k, replace=False)) + 1


def length_offset_label(src_len: int, tgt_len: int, offsets: int) -> int:
    """Class index of the clipped target-minus-source length offset."""
    return int(np.clip(tgt_len - src_len, -offsets, offsets)) + offsets


def nat_inputs(batch: PairBatch, rng: np.random.Generator, offsets: int = 20) -> LossInputs:
    src_ids = pad_batch(batch.src)
    tgt_ids = pad_batch(batch.tgt)
    width = tgt_ids.shape[1]
    rows, labels = [], []
    for b, tgt in enumerate(batch.tgt):
        positions = nat_mask_positions(len(tgt) - 1, rng)
        rows.append(b * width + positions)
        labels.append(tgt_ids[b, positions].copy())
        tgt_ids[b, positions] = MASK_ID
    length_labels = np.array(
        [length_offset_label(len(s) - 1, len(t) - 1, offsets) for s, t in zip(batch.src, batch.tgt)],
        dtype=np.int64,
    )
    return LossInputs(
        src_ids,
        tgt_ids,
        np.concatenate(rows).astype(np.int64),
        np.concatenate(labels).astype(np.int64),
        length_labels=length_labels,
    )


def nat_loss(
    model: Transformer,
    inputs: LossInputs,
    label_smoothing: float = 0.0,
    length_loss_weight: float = 0.1,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    totals: Optional[Dict[str, int]] = None,
) -> LossOutput:
    """Masked-target NLL of the bidirectional decoder plus the weighted length loss."""
    totals = totals or inputs.counts
    encoded = model.encode(inputs.src_ids, train, rng, logits=False)
    decoded = model.decoder_states(inputs.tgt_ids, encoded, causal=False, train=train, rng=rng)
    logits = model.project(_rows(decoded, inputs.tgt_rows), "cmlm")
    cmlm = _normalized(T.cross_entropy(logits, inputs.tgt_labels, label_smoothing, "sum"), totals["tgt"])
    length = _normalized(
        T.cross_entropy(model.length_logits(encoded), inputs.length_labels, 0.0, "sum"), totals["sentences"]
    )
    loss = T.add(cmlm, T.scale(length, length_loss_weight))
    return LossOutput(loss, {"cmlm": cmlm.item(), "length": length.item()}, inputs.counts)


@attr.s(auto_attribs=True)
class Objective(ABC):
    """Loss of one training mode, registered by kind.

    `Objective("pretrain", ...)` returns the subclass registered for that kind.
    """

    kind: str
    label_smoothing: float = attr.ib(default=0.0, converter=float)

    @classmethod
    def register(cls, kind):
        def decorator(subcls):
            kinds = getattr(cls, "kinds", {})
            kinds.update({kind: subcls})
            setattr(cls, "kinds", kinds)
            return subcls

        return decorator

    def __new__(cls, kind: str, *args, **kwargs) -> "Objective":
        if cls is not Objective:
            return super().__new__(cls)
        try:
            objective = getattr(cls, "kinds", {})[kind]
        except KeyError:
            raise UsageError(f"Invalid objective: {kind}")
        return super().__new__(objective)

    @abstractmethod
    def prepare(self, batch: Batch, rng: np.random.Generator) -> LossInputs:
        pass

    @abstractmethod
    def loss(
        self,
        model: Transformer,
        inputs: LossInputs,
        train: bool,
        rng: Optional[np.random.Generator],
        totals: Optional[Dict[str, int]] = None,
    ) -> LossOutput:
        pass


@Objective.register("pretrain")
@attr.s(auto_attribs=True)
class PretrainObjective(Objective):
    lam: float = attr.ib(default=0.7, converter=float)

    @lam.validator
    def _check_lam(self, attribute, value):
        if not 0.0 <= value <= 1.0:
            raise UsageError(f"lam must be in [0, 1], got {value}")

    def prepare(self, batch, rng):
        return pretrain_inputs(batch)

    def loss(self, model, inputs, train, rng, totals=None):
        return pretrain_loss(model, inputs, self.lam, self.label_smoothing, train, rng, totals)


@Objective.register("at")
@attr.s(auto_attribs=True)
class ATObjective(Objective):
    def prepare(self, batch, rng):
        return at_inputs(batch)

    def loss(self, model, inputs, train, rng, totals=None):
        return at_loss(model, inputs, self.label_smoothing, train, rng, totals)


@Objective.register("nat")
@attr.s(auto_attribs=True)
class NATObjective(Objective):
    length_loss_weight: float = attr.ib(default=0.1, converter=float)
    length_offsets: int = attr.ib(default=20, converter=int)

    def prepare(self, batch, rng):
        return nat_inputs(batch, rng, self.length_offsets)

    def loss(self, model, inputs, train, rng, totals=None):
        return nat_loss(model, inputs, self.label_smoothing, self.length_loss_weight, train, rng, totals)

