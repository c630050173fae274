"""Minimal dense-tensor core: tape autodiff, conv2d, Adam, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .ops import (
    add,
    avg_pool2d,
    concat_channels,
    conv2d,
    groupnorm,
    linear,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    silu,
    sub,
    sum_all,
    upsample_nearest,
)
from .tensor import DTYPE, Graph, Tensor, as_tensor, backward

__all__ = [
    "DTYPE", "Graph", "Tensor", "as_tensor", "backward",
    "add", "sub", "mul", "scale", "relu", "silu", "groupnorm", "linear",
    "conv2d", "avg_pool2d", "upsample_nearest", "concat_channels",
    "mean_all", "sum_all", "reshape",
    "AdamState", "adam_step", "save_checkpoint", "load_checkpoint",
]
