from .adam import Adam, AdamState, MissingGradError, adam_step
from .ops import (
    apply_activation,
    conv2d,
    conv_transpose2d,
    instance_norm,
    leaky_relu,
    loss_bce_logits,
    loss_l1,
    loss_mse,
    pad_reflect,
    relu,
    sigmoid,
    tanh,
)
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    concat,
    mul,
    reshape,
    square,
    sub,
    take,
    tabs,
    tmean,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "MissingGradError", "adam_step", "apply_activation", "conv2d",
    "conv_transpose2d", "instance_norm", "leaky_relu", "loss_bce_logits", "loss_l1", "loss_mse",
    "pad_reflect", "relu", "sigmoid", "tanh", "ShapeError", "Tape", "TapeError", "Tensor", "add",
    "backward", "concat", "mul", "reshape", "square", "sub", "take", "tabs", "tmean", "tsum",
]
