"""SGD and Adam with an L2 penalty folded into the gradient."""
from __future__ import annotations

import numpy as np


class Optimizer:
    def __init__(self, params, learning_rate: float, l2_decay: float = 0.0):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.l2_decay = float(l2_decay)

    def _grad(self, p) -> np.ndarray:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if self.l2_decay:
            g = g + self.l2_decay * p.data
        return g

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def step(self):
        for p in self.params:
            p.data = p.data - self.learning_rate * self._grad(p)


class Adam(Optimizer):
    def __init__(self, params, learning_rate=1e-4, l2_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, learning_rate, l2_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for i, p in enumerate(self.params):
            g = self._grad(p)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data = p.data - self.learning_rate * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def optimizer_step(kind: str, params, learning_rate: float, l2_decay: float = 0.0, state=None):
    """One update of ``params``; pass the returned optimizer back as ``state`` to continue."""
    if state is None:
        if kind == "adam":
            state = Adam(params, learning_rate, l2_decay)
        elif kind == "sgd":
            state = SGD(params, learning_rate, l2_decay)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")
    state.step()
    return state
