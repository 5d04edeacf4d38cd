"""Parameter containers."""
from __future__ import annotations

import numpy as np

from . import layers
from .init import xavier_init
from .tensor import Parameter


class Module:
    """Holds named parameters and child modules, discovered by attribute."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                val.name = prefix + key
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(xavier_init(rng, (out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch))

    def __call__(self, x):
        return layers.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = Parameter(xavier_init(rng, (out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim))

    def __call__(self, x):
        return layers.linear(x, self.weight, self.bias)
