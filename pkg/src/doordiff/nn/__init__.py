"""Minimal reverse-mode autodiff core, layers, and optimizers on numpy."""

from doordiff.nn.tensor import (
    Tensor,
    Parameter,
    ShapeError,
    no_grad,
    add,
    mul,
    neg,
    matmul,
    reshape,
    transpose,
    concatenate,
    softmax,
    layer_norm,
    gelu,
    clamp,
    tensor_sum,
    tensor_mean,
    mse_loss,
    conv1d,
    avg_pool_time,
    repeat_time,
    backward,
)
