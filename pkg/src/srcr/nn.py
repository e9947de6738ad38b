"""Small trainable building blocks on top of :mod:`srcr.autodiff`."""

import numpy as np

from .autodiff import Tensor, matmul
from .errors import ShapeError


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """``x W + b`` with ``W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` and ``b = 0``."""

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.bias = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Mlp:
    """``in -> hidden (relu) -> out``, or a single affine map when ``hidden`` is falsy."""

    def __init__(self, in_dim, out_dim, hidden, rng):
        self.in_dim, self.out_dim = in_dim, out_dim
        if hidden:
            self.layers = [Linear(in_dim, hidden, rng), Linear(hidden, out_dim, rng)]
        else:
            self.layers = [Linear(in_dim, out_dim, rng)]

    def __call__(self, x):
        if x.cols != self.in_dim:
            raise ShapeError(f"expected inputs with {self.in_dim} columns, got {x.shape}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    @property
    def final(self):
        return self.layers[-1]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]
