from .gradcheck import gradient_check
from .modules import BatchNorm2d, Conv2d, Linear, Module, load_module_state, module_state
from .ops import (
    accuracy,
    add,
    batch_norm2d,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    relu,
    softmax_cross_entropy,
)
from .sgd import SGD, global_grad_norm, max_abs_grad
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "Module",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "SGD",
    "conv2d",
    "batch_norm2d",
    "relu",
    "linear",
    "add",
    "global_avg_pool",
    "flatten",
    "softmax_cross_entropy",
    "accuracy",
    "module_state",
    "load_module_state",
    "gradient_check",
    "global_grad_norm",
    "max_abs_grad",
]
