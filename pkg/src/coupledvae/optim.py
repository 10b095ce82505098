"""Adam with step-wise learning-rate halving."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        decay_start: int | None = None,
        decay_interval: int = 2000,
    ):
        self.params = list(params)
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_start = decay_start
        self.decay_interval = decay_interval
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def lr_at(self, step: int) -> float:
        """Halve the rate every ``decay_interval`` steps once ``decay_start`` is passed."""
        if self.decay_start is None or step < self.decay_start:
            return self.base_lr
        return self.base_lr * 0.5 ** ((step - self.decay_start) // self.decay_interval + 1)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, step: int | None = None) -> None:
        self.t += 1
        lr = self.lr_at(self.t - 1 if step is None else step)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
