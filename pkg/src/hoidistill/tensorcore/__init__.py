"""Minimal dense-array math with reverse-mode differentiation."""
from .archive import load_archive, read_manifest, save_archive
from .gradcheck import gradcheck, leaf64, relative_error
from .nn import ConfigurationError, Linear, Module, Parameter, multi_head_attention
from .optim import AdamW, OptimizerState, OptimizerUsageError, adamw_step
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concatenate,
    exp,
    getitem,
    kl_divergence,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    max_,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sum_,
    transpose,
)

__all__ = [
    "AdamW", "ConfigurationError", "DimensionError", "Linear", "Module", "NonFiniteError",
    "OptimizerState", "OptimizerUsageError", "Parameter", "Tensor", "adamw_step", "add",
    "as_tensor", "concatenate", "exp", "getitem", "gradcheck", "kl_divergence",
    "l2_normalize", "leaf64", "load_archive", "log", "log_softmax", "matmul", "max_", "mean", "mul",
    "multi_head_attention", "neg", "power", "read_manifest", "relative_error", "relu",
    "reshape", "save_archive", "sigmoid", "softmax", "sum_", "transpose",
]
