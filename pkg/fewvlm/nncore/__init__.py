from fewvlm.nncore.tensor import Tensor, float64_mode, no_grad, parameter
from fewvlm.nncore.layers import Module
from fewvlm.nncore.optim import Adam, AdamState, adam_step, warmup_lr

__all__ = [
    "Adam",
    "AdamState",
    "Module",
    "Tensor",
    "adam_step",
    "float64_mode",
    "no_grad",
    "parameter",
    "warmup_lr",
]
