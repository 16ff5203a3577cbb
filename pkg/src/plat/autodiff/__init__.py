"""Minimal float64 tensor engine with reverse-mode differentiation."""
from plat.autodiff.gradcheck import GradCheckReport, grad_check, numerical_grad
from plat.autodiff.tensor import (
    FORWARD_OPS,
    Tensor,
    add,
    clip,
    concat,
    cross_entropy,
    embedding,
    exp,
    forward_op,
    gelu,
    grad_enabled,
    layernorm,
    linear,
    log_softmax,
    matmul,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    parameter,
    reshape,
    scale,
    slice_,
    softmax,
    stack,
    sum_,
    transpose,
)

__all__ = [
    "FORWARD_OPS", "GradCheckReport", "Tensor", "add", "clip", "concat", "cross_entropy",
    "embedding", "exp", "forward_op", "gelu", "grad_check", "grad_enabled", "layernorm",
    "linear", "log_softmax", "matmul", "mean", "minimum", "mul", "neg", "no_grad",
    "numerical_grad", "parameter", "reshape", "scale", "slice_", "softmax", "stack",
    "sum_", "transpose",
]
