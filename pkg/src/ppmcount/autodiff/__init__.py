from .gradcheck import gradient_check
from .ops import (
    adaptive_max_pool,
    add,
    bilinear_upsample,
    channel_slice,
    concat_channels,
    conv2d,
    max_pool_2x2,
    relu,
    scale,
    sigmoid,
    sum_squared_error,
    total,
)
from .optim import SgdMomentumState, sgd_step
from .tensor import Tape, Tensor, backward

__all__ = [
    "Tape", "Tensor", "backward", "gradient_check", "SgdMomentumState", "sgd_step",
    "adaptive_max_pool", "add", "bilinear_upsample", "channel_slice", "concat_channels",
    "conv2d", "max_pool_2x2", "relu", "scale", "sigmoid", "sum_squared_error", "total",
]
