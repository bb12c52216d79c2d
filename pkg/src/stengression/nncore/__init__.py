"""Minimal float64 autodiff core: tensors, layers and the Adam optimizer."""
import numpy as np

from .layers import LstmParams, dropout, linear, lstm_step, parameter, xavier_init
from .optim import AdamState, NonFiniteGradientError, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    activation,
    add,
    as_tensor,
    backward,
    concat,
    grad_enabled,
    l2_norm,
    matmul,
    mul,
    neighbor_max,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sub,
    take,
    tanh,
    transpose,
)


def numerical_gradient(fn, tensor, h=1e-5):
    """Central finite differences of scalar ``fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn().item()
            flat[k] = orig - h
            down = fn().item()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


__all__ = [
    "AdamState",
    "LstmParams",
    "NonFiniteGradientError",
    "ShapeError",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "dropout",
    "grad_enabled",
    "l2_norm",
    "linear",
    "lstm_step",
    "matmul",
    "max_relative_error",
    "mul",
    "neighbor_max",
    "no_grad",
    "numerical_gradient",
    "parameter",
    "power",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "sigmoid",
    "sub",
    "take",
    "tanh",
    "transpose",
    "xavier_init",
]
