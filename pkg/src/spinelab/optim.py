"""Adaptive-moment optimiser over tensor parameters."""
from __future__ import annotations

import numpy as np

from .tensor import NumericError


class Adam:
    """Bias-corrected Adam; no weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("adam", "non-finite gradient; update aborted")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def optimizer_update(params, grads, opt_state=None, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Functional Adam step on plain arrays; returns (new_params, new_state)."""
    if opt_state is None:
        opt_state = {"t": 0, "m": [np.zeros_like(p) for p in params],
                     "v": [np.zeros_like(p) for p in params]}
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("adam", "non-finite gradient; update aborted")
    b1, b2 = betas
    t = opt_state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, opt_state["m"], opt_state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        new_p.append(p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}
