"""Minimal dense-tensor core with hand-written reverse-mode gradients."""

from .gradcheck import grad_check
from .ops import (
    IGNORE_INDEX,
    MaskingError,
    add,
    concat,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    masked_cross_entropy,
    matmul,
    mul,
    narrow,
    reshape,
    scale,
    softmax,
    take_rows,
    transpose,
    tsum,
)
from .tensor import Parameter, ShapeError, Tensor, no_grad, unbroadcast

__all__ = [
    "IGNORE_INDEX",
    "MaskingError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "add",
    "concat",
    "dropout",
    "embedding_lookup",
    "gelu",
    "grad_check",
    "layer_norm",
    "masked_cross_entropy",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "reshape",
    "scale",
    "softmax",
    "take_rows",
    "transpose",
    "tsum",
    "unbroadcast",
]
