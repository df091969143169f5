"""Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericFault


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """In-place Adam update of ``params[name]`` arrays using ``grads[name]``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        state.m[name] = m
        upd = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= upd.astype(p.dtype, copy=False)


class Adam:
    """Adam over a dict of named leaf tensors."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(arrays, grads, self.state)
