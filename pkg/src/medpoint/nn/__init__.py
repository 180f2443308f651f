from .checkpoint import load_checkpoint, save_checkpoint
from .layers import GroupNorm, Linear, Module, SharedMLP, default_groups
from .optim import Adam, OptimizerState, TrainingFault, linear_decay_lr
from .tensor import (
    Tensor,
    backward,
    concat,
    gather,
    group_norm,
    leaky_relu,
    linear,
    log_softmax,
    max_pool,
    no_grad,
    softmax,
)

__all__ = [
    "Adam",
    "GroupNorm",
    "Linear",
    "Module",
    "OptimizerState",
    "SharedMLP",
    "Tensor",
    "TrainingFault",
    "backward",
    "concat",
    "default_groups",
    "gather",
    "group_norm",
    "leaky_relu",
    "linear",
    "linear_decay_lr",
    "load_checkpoint",
    "log_softmax",
    "max_pool",
    "no_grad",
    "save_checkpoint",
    "softmax",
]
