from cemat.tensor.core import (
    Tensor,
    add,
    backward,
    check_finite,
    concat,
    cross_entropy,
    default_dtype,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    scale,
    softmax,
    sum,
    take_rows,
    transpose,
)

__all__ = [
    "Tensor",
    "add",
    "backward",
    "check_finite",
    "concat",
    "cross_entropy",
    "default_dtype",
    "dropout",
    "embedding",
    "layer_norm",
    "log_softmax",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "sum",
    "take_rows",
    "transpose",
]
