"""Minimal dense tensor engine with reverse-mode autodiff."""

from . import ops
from .gradcheck import GradcheckReport, gradcheck, gradcheck_all, relative_error
from .ops import (
    add,
    concat,
    cross_entropy,
    fused_attention,
    gelu,
    getitem,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    sub,
    take,
    transpose,
)
from .tensor import Tensor, as_tensor, debug_mode, grad_enabled, no_grad, set_debug

__all__ = [
    "Tensor", "as_tensor", "no_grad", "set_debug", "debug_mode", "grad_enabled",
    "add", "sub", "mul", "scale", "matmul", "softmax", "log_softmax", "layer_norm", "gelu",
    "reshape", "transpose", "concat", "getitem", "take", "mean", "cross_entropy", "fused_attention",
    "gradcheck", "gradcheck_all", "GradcheckReport", "relative_error", "ops",
]
