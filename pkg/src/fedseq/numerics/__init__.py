"""Tensor kernels, reverse-mode tape, optimizers, and a gradient checker."""

from .gradcheck import GradCheckReport, finite_diff_check
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, OptimizerState, optimizer_step
from .tensor import (
    Tape,
    Tensor,
    add,
    conv1d_causal,
    corrupted_silu_grad,
    cross_entropy,
    exp,
    matmul,
    mean_all,
    mul,
    neg,
    reshape,
    rmsnorm,
    silu,
    slice_axis,
    softplus,
    stack,
    take_index,
    tanh,
    tensor_sum,
    transpose,
    unstack,
)

__all__ = [
    "Tape", "Tensor", "add", "conv1d_causal", "corrupted_silu_grad",
    "cross_entropy", "exp", "matmul", "mean_all", "mul", "neg", "reshape",
    "rmsnorm", "silu", "slice_axis", "softplus", "stack", "take_index",
    "tanh", "tensor_sum", "transpose", "unstack",
    "OptimizerState", "optimizer_step", "ADAM_BETA1", "ADAM_BETA2", "ADAM_EPS",
    "GradCheckReport", "finite_diff_check",
]
