"""Numerical core: tensors, autodiff, counter-based randomness, grad checks."""

from .gradcheck import GradCheckReport, grad_check, numerical_gradient
from .rng import RngState
from .tensor import (
    EngineError,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    constant,
    div,
    exp,
    finite_checks_enabled,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_mean,
    masked_sum,
    matmul,
    mul,
    neg,
    parameter,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    set_finite_checks,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
    stop_gradient,
    straight_through,
    sub,
    transpose,
    zero_grads,
)
