"""Trainable building blocks: parameters, linear layers, multi-head attention."""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    matmul,
    reshape,
    softmax,
    transpose,
)


class ConfigurationError(ValueError):
    pass


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters are skipped by the optimizer."""

    def __init__(self, data, name="", frozen=False, dtype=None):
        super().__init__(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.frozen = bool(frozen)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Minimal container: collects Parameters from attributes, recursively."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def freeze(self):
        for p in self.parameters():
            p.frozen = True
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    """``y = x @ W + b`` with W stored as (in, out)."""

    def __init__(self, d_in, d_out, rng, name="linear", bias=True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias") if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


def split_heads(x, heads):
    """(..., L, D) -> (..., heads, L, D/heads)"""
    *lead, length, d = x.shape
    x = reshape(x, (*lead, length, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return transpose(x, axes)


def merge_heads(x):
    """(..., heads, L, dh) -> (..., L, heads*dh)"""
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = transpose(x, axes)
    *lead, length, heads, dh = x.shape
    return reshape(x, (*lead, length, heads * dh))


def scaled_dot_attention(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    return matmul(softmax(logits, axis=-1), v)


def multi_head_attention(q, k, v, heads, out_proj=None):
    """Standard multi-head attention over already-projected Q, K, V.

    q: (..., 1, D); k, v: (..., L, D). Heads run on contiguous D/heads
    slices, are concatenated, then ``out_proj`` is applied.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"D={d} is not divisible by heads={heads}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ConfigurationError("attention operand shapes disagree")
    out = merge_heads(scaled_dot_attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)))
    return out_proj(out) if out_proj is not None else out
