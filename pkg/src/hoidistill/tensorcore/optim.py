from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimizerUsageError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """AdamW with decoupled weight decay.

    Moments are keyed by parameter position in ``params``, so the same list
    order must be used for the lifetime of the optimizer.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        for i, p in enumerate(self.params):
            self.state.exp_avg[i] = np.zeros_like(p.data)
            self.state.exp_avg_sq[i] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adamw_step(self.params, self.state)


def adamw_step(params, state):
    """One in-place AdamW update; clears gradients afterwards."""
    trainable = [(i, p) for i, p in enumerate(params) if not p.frozen]
    for i, p in trainable:
        if p.grad is None:
            raise OptimizerUsageError(f"parameter {getattr(p, 'name', i)!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, p in trainable:
        g = p.grad.astype(p.dtype, copy=False)
        m = state.exp_avg[i]
        v = state.exp_avg_sq[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        # decoupled decay first, then the adaptive step
        p.data = p.data * (1.0 - state.lr * state.weight_decay)
        denom = np.sqrt(v / bc2) + state.eps
        p.data = (p.data - state.lr * (m / bc1) / denom).astype(p.dtype, copy=False)
    for p in params:
        p.grad = None
    return params, state
