"""Minimal reverse-mode autodiff: tensors, ops, Adam, gradient checking."""

from .gradcheck import grad_check, kink_margin
from .optim import Adam, AdamState, adam_step, clip_global_norm
from .tensor import (
    Tensor,
    add,
    add_bias,
    clip,
    concat_channels,
    conv2d,
    conv2d_transpose,
    conv_output_extent,
    crop_center,
    mse_loss,
    mul,
    relu,
    scale,
    sub,
    tanh,
    tensor_sum,
)

__all__ = [
    "Tensor", "add", "add_bias", "clip", "concat_channels", "conv2d",
    "conv2d_transpose", "conv_output_extent", "crop_center", "mse_loss",
    "mul", "relu", "scale", "sub", "tanh", "tensor_sum",
    "Adam", "AdamState", "adam_step", "clip_global_norm",
    "grad_check", "kink_margin",
]
