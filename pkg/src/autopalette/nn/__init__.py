from .tensor import (
    Tensor,
    add,
    avg_pool2,
    backward,
    conv2d,
    cross_entropy,
    div,
    exp,
    finite_diff_check,
    getitem,
    instance_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    power,
    relu,
    reshape,
    softmax,
    straight_through,
    sub,
    tmax,
    tmean,
    transpose,
    tsum,
    xlogx,
)
from .convnet import ConvNetParams, forward_convnet
from .optim import adam_step, sgd_step

__all__ = [
    "Tensor", "add", "avg_pool2", "backward", "conv2d", "cross_entropy", "div",
    "exp", "finite_diff_check", "getitem", "instance_norm", "linear", "log",
    "log_softmax", "matmul", "mul", "power", "relu", "reshape", "softmax",
    "straight_through", "sub", "tmax", "tmean", "transpose", "tsum", "xlogx",
    "ConvNetParams", "forward_convnet", "adam_step", "sgd_step",
]
