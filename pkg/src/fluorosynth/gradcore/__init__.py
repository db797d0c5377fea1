"""Dense tensors, reverse-mode autodiff and the Adamax optimizer."""
from .archive import ArchiveError, read_archive, write_archive
from .ops import (
    activation,
    add,
    concat,
    conv2d,
    conv2d_transpose,
    global_avg_pool,
    gram_matrix,
    instance_norm,
    leaky_relu,
    max_pool2d,
    mean,
    mul,
    reduce_loss,
    reflection_pad,
    relu,
    reshape,
    same_padding,
    scale,
    sigmoid,
    softplus,
    sub,
)
from .ops import sum as sum_
from .optim import Adamax, AdamaxState, adamax_step
from .tensor import Tape, Tensor, active_tape, backward, parameters

__all__ = [
    "Adamax",
    "AdamaxState",
    "ArchiveError",
    "Tape",
    "Tensor",
    "activation",
    "active_tape",
    "adamax_step",
    "add",
    "backward",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "global_avg_pool",
    "gram_matrix",
    "instance_norm",
    "leaky_relu",
    "max_pool2d",
    "mean",
    "mul",
    "parameters",
    "read_archive",
    "reduce_loss",
    "reflection_pad",
    "relu",
    "reshape",
    "same_padding",
    "scale",
    "sigmoid",
    "softplus",
    "sub",
    "sum_",
    "write_archive",
]
