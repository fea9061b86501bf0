from .gradcheck import GradCheckReport, central_difference, finite_diff_check
from .ops import (
    add,
    concat,
    conv,
    conv_output_extent,
    dense,
    dropout,
    flatten,
    mse_loss,
    pointwise,
    relu,
    reshape,
    scale,
)
from .optim import ParamSet, adam_step
from .tensor import Tensor

__all__ = [
    "GradCheckReport",
    "ParamSet",
    "Tensor",
    "adam_step",
    "add",
    "central_difference",
    "concat",
    "conv",
    "conv_output_extent",
    "dense",
    "dropout",
    "finite_diff_check",
    "flatten",
    "mse_loss",
    "pointwise",
    "relu",
    "reshape",
    "scale",
]
