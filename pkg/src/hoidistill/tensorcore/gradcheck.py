"""Central finite-difference gradient checking in float64."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numerical_grad(fn, leaves, h=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. every entry of each leaf."""
    out = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data, dtype=np.float64)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.sum())
            flat[i] = orig - h
            fm = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def analytic_grad(fn, leaves):
    for leaf in leaves:
        leaf.grad = None
    y = fn()
    y = y.sum() if y.data.size != 1 else y
    y.backward()
    return [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]


def gradcheck(fn, leaves, h=1e-3):
    """Compare reverse-mode and finite-difference gradients.

    ``leaves`` must be float64 tensors with ``requires_grad`` (the 64-bit
    shadow path); ``fn`` rebuilds the graph from them on each call.
    Non-scalar outputs are summed. Returns the worst relative error.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError("gradcheck leaves must be float64")
    ana = analytic_grad(fn, leaves)
    num = numerical_grad(fn, leaves, h=h)
    return max(relative_error(a, n) for a, n in zip(ana, num))


def leaf64(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)
