from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    """Adam with bias-corrected moments and optional per-group learning rates.

    ``groups`` maps a learning rate to the parameters it applies to.
    """

    def __init__(self, groups: list[tuple[float, list[Parameter]]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for _, ps in groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for _, ps in groups for p in ps}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for lr, params in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                m = self.m[id(p)]
                v = self.v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, params in self.groups:
            for p in params:
                p.grad = None
