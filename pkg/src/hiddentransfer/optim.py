"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Standard Adam with bias correction.

    `params` is a dict name -> Tensor; only tensors with requires_grad are
    updated. Zero gradient leaves a parameter exactly unchanged.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            update = (s.lr / bc1) * m / (np.sqrt(v / bc2) + s.eps)
            p.data = p.data - update.astype(p.data.dtype)


def adam_step(params, state: AdamState):
    """Single functional update for pre-filled grads (thin wrapper used in
    tests; training loops hold an Adam instance instead)."""
    opt = Adam.__new__(Adam)
    opt.params = {k: p for k, p in params.items() if p.requires_grad}
    opt.state = state
    for name, p in opt.params.items():
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    opt.step()
    return state
