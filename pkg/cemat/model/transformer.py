"""Transformer encoder with a bidirectional decoder.

The same decoder parameters serve both decoding modes: full self-attention
for conditional masked language modeling and non-autoregressive translation,
and a lower-triangular self-attention mask for autoregressive translation.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple

import attr
import numpy as np

from cemat.data.vocab import PAD_ID
from cemat.errors import DataError, ShapeError
from cemat.tensor import core as T
from cemat.tensor.core import Tensor
from cemat.utils.converters import to_bool

log = logging.getLogger(__name__)

NEG_INF = -1e9


def _check_positive(instance, attribute, value):
    if value < 1:
        raise ValueError(f"{attribute.name} must be positive, got {value}")


def _check_heads(instance, attribute, value):
    if instance.model_dim % value:
        raise ValueError(f"model_dim {instance.model_dim} is not divisible by heads {value}")


def _check_dim(instance, attribute, value):
    if value < 2 or value % 2:
        raise ValueError(f"model_dim must be even, got {value}")


def _check_dropout(instance, attribute, value):
    if not 0.0 <= value < 1.0:
        raise ValueError(f"dropout must be in [0, 1), got {value}")


@attr.s(auto_attribs=True, frozen=True)
class ModelConfig:
    vocab_size: int = attr.ib(converter=int, validator=_check_positive)
    enc_layers: int = attr.ib(default=2, converter=int)
    dec_layers: int = attr.ib(default=2, converter=int)
    model_dim: int = attr.ib(default=64, converter=int, validator=_check_dim)
    heads: int = attr.ib(default=4, converter=int, validator=[_check_positive, _check_heads])
    ffn_dim: int = attr.ib(default=256, converter=int, validator=_check_positive)
    dropout: float = attr.ib(default=0.1, converter=float, validator=_check_dropout)
    max_positions: int = attr.ib(default=256, converter=int, validator=_check_positive)
    tie_embeddings: bool = attr.ib(default=True, converter=to_bool)
    learned_positions: bool = attr.ib(default=False, converter=to_bool)
    length_offsets: int = attr.ib(default=20, converter=int)

    @property
    def length_classes(self) -> int:
        return 2 * self.length_offsets + 1

    def as_dict(self) -> Dict:
        return attr.asdict(self)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table of shape `(length, dim)`.

    Raises:
        ValueError: if `dim` is odd.
    """
    if dim % 2:
        raise ValueError(f"Sinusoidal positions need an even dimension, got {dim}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)
    return table


def expected_parameter_count(config: ModelConfig) -> int:
    d, f, v = config.model_dim, config.ffn_dim, config.vocab_size
    norm = 2 * d
    attention = 4 * (d * d + d) + norm
    ffn = d * f + f + f * d + d + norm
    total = v * d + 2 * norm + 2 * norm
    total += config.enc_layers * (attention + ffn)
    total += config.dec_layers * (2 * attention + ffn)
    total += 2 * v + (0 if config.tie_embeddings else 2 * d * v)
    total += d * config.length_classes + config.length_classes
    if config.learned_positions:
        total += config.max_positions * d
    return total


@attr.s(auto_attribs=True)
class EncoderOutput:
    hidden: Tensor
    keep: np.ndarray
    logits: Optional[Tensor] = None


class Transformer:
    """Encoder, decoder and output heads over one shared embedding table.

    Parameters live in `params`, an ordered mapping from dotted names to
    tensors. Layers are pre-norm; token embeddings are scaled by the square
    root of the model dimension and normalized after adding positions.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params
        self._positions = sinusoidal_positions(config.max_positions, config.model_dim)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Transformer":
        d, f, v = config.model_dim, config.ffn_dim, config.vocab_size
        params: Dict[str, Tensor] = {}

        def xavier(name, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)

        def zeros(name, size):
            params[name] = Tensor(np.zeros(size), requires_grad=True)

        def norm(prefix):
            params[f"{prefix}.gamma"] = Tensor(np.ones(d), requires_grad=True)
            zeros(f"{prefix}.beta", d)

        def attention(prefix):
            norm(f"{prefix}_norm")
            for proj in ("q", "k", "v", "o"):
                xavier(f"{prefix}.w{proj}", d, d)
                zeros(f"{prefix}.b{proj}", d)

        def ffn(prefix):
            norm(f"{prefix}_norm")
            xavier(f"{prefix}.w1", d, f)
            zeros(f"{prefix}.b1", f)
            xavier(f"{prefix}.w2", f, d)
            zeros(f"{prefix}.b2", d)

        embed = rng.normal(0.0, d ** -0.5, (v, d))
        embed[PAD_ID] = 0.0
        params["embed.tokens"] = Tensor(embed, requires_grad=True)
        if config.learned_positions:
            params["embed.positions"] = Tensor(
                sinusoidal_positions(config.max_positions, d), requires_grad=True
            )
        norm("enc.embed_norm")
        for i in range(config.enc_layers):
            attention(f"enc.{i}.self_attn")
            ffn(f"enc.{i}.ffn")
        norm("enc.final_norm")
        norm("dec.embed_norm")
        for i in range(config.dec_layers):
            attention(f"dec.{i}.self_attn")
            attention(f"dec.{i}.cross_attn")
            ffn(f"dec.{i}.ffn")
        norm("dec.final_norm")
        for head in ("mlm", "cmlm"):
            if not config.tie_embeddings:
                xavier(f"{head}.proj", d, v)
            zeros(f"{head}.bias", v)
        xavier("length.proj", d, config.length_classes)
        zeros("length.bias", config.length_classes)
        model = cls(config, params)
        log.debug("Initialized transformer with %d parameters", model.parameter_count)
        return model

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters.

        Learned positions missing from `arrays` keep their sinusoidal
        initialization, so a sinusoidal checkpoint can seed a learned-position model.
        """
        mismatched = (set(self.params) - set(arrays) - {"embed.positions"}) | (set(arrays) - set(self.params))
        if mismatched:
            raise DataError(f"Checkpoint parameters do not match the model: {sorted(mismatched)}")
        for name, param in self.params.items():
            if name not in arrays:
                log.info("Initializing %s from the sinusoidal table", name)
                continue
            if arrays[name].shape != param.shape:
                raise DataError(f"Checkpoint parameter {name} has shape {arrays[name].shape}, expected {param.shape}")
            param.data = np.array(arrays[name], dtype=param.data.dtype)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    # Layers

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def _linear(self, x: Tensor, weight: str, bias: str) -> Tensor:
        return T.add(T.matmul(x, self.params[weight]), self.params[bias])

    def _embed(self, ids: np.ndarray, prefix: str, train: bool, rng) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"Token ids must be (batch, length), got shape {ids.shape}")
        length = ids.shape[1]
        if length > self.config.max_positions:
            raise ShapeError(f"Sequence length {length} exceeds max_positions {self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(f"Token ids out of range for vocabulary of size {self.config.vocab_size}")
        x = T.scale(T.embedding(self.params["embed.tokens"], ids), math.sqrt(self.config.model_dim))
        if self.config.learned_positions:
            x = T.add(x, T.take_rows(self.params["embed.positions"], np.arange(length)))
        else:
            x = T.add(x, self._positions[:length])
        x = self._norm(x, f"{prefix}.embed_norm")
        return T.dropout(x, self.config.dropout, rng, train)

    def _attention(self, prefix: str, query: Tensor, memory: Tensor, keep: np.ndarray, train: bool, rng) -> Tensor:
        batch, q_len, dim = query.shape
        k_len = memory.shape[1]
        heads = self.config.heads
        head_dim = dim // heads
        q = T.transpose(T.reshape(self._linear(query, f"{prefix}.wq", f"{prefix}.bq"), (batch, q_len, heads, head_dim)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self._linear(memory, f"{prefix}.wk", f"{prefix}.bk"), (batch, k_len, heads, head_dim)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self._linear(memory, f"{prefix}.wv", f"{prefix}.bv"), (batch, k_len, heads, head_dim)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(head_dim))
        keep = keep[:, None]
        # Blocked entries get weight exactly 0; fully blocked rows become all zeros.
        weights = T.mul(T.softmax(T.masked_fill(scores, ~keep, NEG_INF)), keep)
        weights = T.dropout(weights, self.config.dropout, rng, train)
        context = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (batch, q_len, dim))
        return self._linear(context, f"{prefix}.wo", f"{prefix}.bo")

    def _ffn(self, prefix: str, x: Tensor, train: bool, rng) -> Tensor:
        hidden = T.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        hidden = T.dropout(hidden, self.config.dropout, rng, train)
        return self._linear(hidden, f"{prefix}.w2", f"{prefix}.b2")

    def _residual(self, x: Tensor, sublayer: Tensor, train: bool, rng) -> Tensor:
        return T.add(x, T.dropout(sublayer, self.config.dropout, rng, train))

    # Public surface

    def encode(self, src_ids: np.ndarray, train: bool = False, rng=None, logits: bool = True) -> EncoderOutput:
        """Encode source ids of shape `(batch, length)`.

        Returns hidden states `(batch, length, dim)`, the key mask of non-pad
        positions and, unless `logits` is off, MLM logits `(batch, length, vocab)`.
        """
        src_ids = np.asarray(src_ids)
        keep = src_ids != PAD_ID
        self_keep = np.broadcast_to(keep[:, None, :], (keep.shape[0], keep.shape[1], keep.shape[1]))
        x = self._embed(src_ids, "enc", train, rng)
        for i in range(self.config.enc_layers):
            prefix = f"enc.{i}"
            normed = self._norm(x, f"{prefix}.self_attn_norm")
            x = self._residual(x, self._attention(f"{prefix}.self_attn", normed, normed, self_keep, train, rng), train, rng)
            x = self._residual(x, self._ffn(f"{prefix}.ffn", self._norm(x, f"{prefix}.ffn_norm"), train, rng), train, rng)
        hidden = self._norm(x, "enc.final_norm")
        return EncoderOutput(hidden, keep, self.project(hidden, "mlm") if logits else None)

    def decoder_states(
        self, tgt_ids: np.ndarray, encoded: EncoderOutput, causal: bool, train: bool = False, rng=None
    ) -> Tensor:
        tgt_ids = np.asarray(tgt_ids)
        batch, length = tgt_ids.shape
        tgt_keep = tgt_ids != PAD_ID
        self_keep = np.broadcast_to(tgt_keep[:, None, :], (batch, length, length))
        if causal:
            self_keep = self_keep & np.tril(np.ones((length, length), dtype=bool))
        cross_keep = np.broadcast_to(encoded.keep[:, None, :], (batch, length, encoded.keep.shape[1]))
        x = self._embed(tgt_ids, "dec", train, rng)
        for i in range(self.config.dec_layers):
            prefix = f"dec.{i}"
            normed = self._norm(x, f"{prefix}.self_attn_norm")
            x = self._residual(x, self._attention(f"{prefix}.self_attn", normed, normed, self_keep, train, rng), train, rng)
            normed = self._norm(x, f"{prefix}.cross_attn_norm")
            x = self._residual(
                x, self._attention(f"{prefix}.cross_attn", normed, encoded.hidden, cross_keep, train, rng), train, rng
            )
            x = self._residual(x, self._ffn(f"{prefix}.ffn", self._norm(x, f"{prefix}.ffn_norm"), train, rng), train, rng)
        return self._norm(x, "dec.final_norm")

    def project(self, hidden: Tensor, head: str) -> Tensor:
        """Vocabulary logits of the `mlm` or `cmlm` head for hidden states of any leading shape."""
        if self.config.tie_embeddings:
            weight = T.transpose(self.params["embed.tokens"])
        else:
            weight = self.params[f"{head}.proj"]
        return T.add(T.matmul(hidden, weight), self.params[f"{head}.bias"])

    def decode_bidirectional(self, tgt_ids: np.ndarray, encoded: EncoderOutput, train: bool = False, rng=None) -> Tensor:
        return self.project(self.decoder_states(tgt_ids, encoded, False, train, rng), "cmlm")

    def decode_causal(self, tgt_ids: np.ndarray, encoded: EncoderOutput, train: bool = False, rng=None) -> Tensor:
        """Logits at position t depend only on target positions up to t and the source."""
        return self.project(self.decoder_states(tgt_ids, encoded, True, train, rng), "cmlm")

    def length_logits(self, encoded: EncoderOutput) -> Tensor:
        """Length-offset logits read at the source language tag, one row per sentence."""
        batch, length, dim = encoded.hidden.shape
        first = T.take_rows(T.reshape(encoded.hidden, (batch * length, dim)), np.arange(batch) * length)
        return self._linear(first, "length.proj", "length.bias")


def pad_batch(sequences: List[List[int]], length: Optional[int] = None) -> np.ndarray:
    """Right-pad id sequences into a `(batch, length)` array."""
    length = length if length is not None else max((len(s) for s in sequences), default=0)
    batch = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    for row, sequence in enumerate(sequences):
        batch[row, : len(sequence)] = sequence
    return batch
