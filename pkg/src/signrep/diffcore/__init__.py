from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .optim import OptimizerState, adamw_step, clip_grad_norm, cosine_warmup_lr, global_norm
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    conv_transpose1d,
    div,
    exp,
    gelu,
    index_select,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    sqrt,
    square,
    sub,
    take,
    transpose,
    tsum,
)

__all__ = [
    "GradCheckError", "GradCheckReport", "OptimizerState", "Tensor",
    "adamw_step", "add", "as_tensor", "clip_grad_norm", "concat", "conv1d",
    "conv_transpose1d", "cosine_warmup_lr", "div", "exp", "gelu", "global_norm",
    "grad_check", "index_select", "layer_norm", "log", "log_softmax", "matmul",
    "maximum", "mean", "mul", "relu", "reshape", "scale", "sigmoid", "smooth_l1",
    "softmax", "sqrt", "square", "sub", "take", "transpose", "tsum",
]
