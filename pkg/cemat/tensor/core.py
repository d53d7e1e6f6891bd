"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray. Operations on tensors that require gradients
record their parents and a backward rule; `backward` walks the recorded graph
once in reverse topological order and accumulates gradients into the leaves.
"""

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from cemat.errors import AutogradError, NumericError, ShapeError

PRECISIONS = {"single": np.float32, "double": np.float64}

_state = {"dtype": np.float32, "grad": True, "check_finite": False}

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int]


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Create tensors in `single` or `double` precision inside the block."""
    previous = _state["dtype"]
    _state["dtype"] = PRECISIONS[mode]
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


@contextlib.contextmanager
def check_finite() -> Iterator[None]:
    """Raise NumericError as soon as an operation yields NaN or inf."""
    previous = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Backward] = None
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Tensors can only be divided by Python scalars")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    tensor = Tensor.__new__(Tensor)
    dtype = like.data.dtype if like is not None else _state["dtype"]
    tensor.data = np.asarray(value, dtype=dtype)
    tensor.grad = None
    tensor.requires_grad = False
    tensor.name = None
    tensor._parents = ()
    tensor._backward = None
    tensor._consumed = False
    return tensor


def _result(value: np.ndarray, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(value)):
        raise NumericError("Non-finite value produced by a tensor operation")
    out = _lift(value)
    out.data = value
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every leaf reachable from a scalar `loss`.

    Gradients accumulate into leaves, so several graphs can be back-propagated
    before an optimizer step. Each graph can be back-propagated only once.

    Raises:
        ShapeError: if `loss` is not a scalar.
        AutogradError: if the graph was already back-propagated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise AutogradError("backward called twice on the same graph; run a new forward pass")
    if not loss.requires_grad:
        raise AutogradError("loss does not depend on any tensor requiring gradients")

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product."""
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: ArrayLike) -> Tensor:
    """Batched matrix product; `b` may be a plain 2-D weight."""
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), _backward)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), _backward)


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(a.data, axis)

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), _backward)


def layer_norm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis, then scale by `gamma` and shift by `beta`."""
    for param in (gamma, beta):
        if param is not None and param.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: parameter shape {param.shape} does not match {x.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    lead = tuple(range(x.ndim - 1))

    def _backward(g):
        g_normed = g * gamma.data if gamma is not None else g
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * normed).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _result(out.astype(x.dtype, copy=False), parents, _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` for integer `ids` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {table.shape}")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return _result(table.data[ids], (table,), _backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.int64)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, rows, g)
        return (grad,)

    return _result(a.data[rows], (a,), _backward)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; the identity when not training or `p` is 0."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout needs a random generator in training mode")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not match shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the boolean `mask` is set by a constant."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} does not match {a.shape}")
    out = np.where(mask, a.dtype.type(value), a.data)
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis, keepdims), 1.0 / count)


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Label-smoothed cross-entropy of 2-D `logits` against integer `labels`.

    Each row's loss is -(1 - s) * log p[label] - s * mean_v log p[v].
    `reduction` is `mean` over rows or `sum`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    rows, vocab = logits.shape
    if rows == 0:
        return _lift(0.0, logits)
    logp = _log_softmax(logits.data, axis=-1)
    picked = logp[np.arange(rows), labels]
    losses = -(1.0 - smoothing) * picked - smoothing * logp.mean(axis=-1)
    divisor = rows if reduction == "mean" else 1
    value = np.asarray(losses.sum() / divisor, dtype=logits.dtype)

    def _backward(g):
        target = np.full_like(logp, smoothing / vocab)
        target[np.arange(rows), labels] += 1.0 - smoothing
        return ((np.exp(logp) - target) * (g / divisor),)

    return _result(value, (logits,), _backward)
