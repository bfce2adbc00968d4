"""Minimal dense-tensor arithmetic with taped reverse-mode differentiation."""

from __future__ import annotations

import numpy as np

from .gradcheck import grad_check
from .ops import (
    ScatterPlan,
    add,
    add_channel_bias,
    add_row_bias,
    concat,
    conv2d,
    div,
    exp,
    gather_elements,
    gather_rows,
    gram_batch,
    leaky_relu,
    linear,
    log_softmax_rows,
    matvec_batch,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale_rows,
    segment_reduce,
    sigmoid,
    slice_axis,
    softmax_rows,
    split,
    sub,
    transpose2d,
    upsample2_nearest,
)
from .segments import SegmentIndex
from .tensor import (
    ContractError,
    DimensionError,
    EmptyGroupError,
    Tape,
    Tensor,
    zero_grad,
)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


__all__ = [
    "ContractError",
    "ScatterPlan",
    "DimensionError",
    "EmptyGroupError",
    "SegmentIndex",
    "Tape",
    "Tensor",
    "add",
    "add_channel_bias",
    "add_row_bias",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gather_elements",
    "gather_rows",
    "grad_check",
    "gram_batch",
    "leaky_relu",
    "linear",
    "log_softmax_rows",
    "matvec_batch",
    "mul",
    "neg",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale_rows",
    "segment_reduce",
    "sigmoid",
    "slice_axis",
    "softmax_rows",
    "split",
    "sub",
    "transpose2d",
    "upsample2_nearest",
    "xavier_uniform",
    "zero_grad",
]
