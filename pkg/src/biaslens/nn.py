"""Small fully-connected building blocks on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from .rng import RngStream
from .tensor import Tensor, add, matmul, scale, tanh


class Dense:
    """Affine layer y = x @ W + b, with W shaped (n_in, n_out)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: RngStream, gain: float = 1.0) -> "Dense":
        # Xavier-style scale keeps tanh activations in their linear-ish range.
        w = rng.normal(size=(n_in, n_out), scale=gain * np.sqrt(2.0 / (n_in + n_out)))
        return cls(w, np.zeros(n_out))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "Dense":
        return cls(np.zeros((n_in, n_out)), np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Mlp:
    """Dense layers with tanh between them; the last layer stays linear."""

    def __init__(self, layers: list[Dense]):
        self.layers = layers

    @classmethod
    def init(cls, sizes: list[int], rng: RngStream, zero_last: bool = False) -> "Mlp":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                layers.append(Dense.zeros(n_in, n_out))
            else:
                layers.append(Dense.init(n_in, n_out, rng.split(f"layer{i}")))
        return cls(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def squash01(x: Tensor) -> Tensor:
    """Map reals into [0, 1] via 0.5 * (tanh(x) + 1)."""
    half = scale(tanh(x), 0.5)
    return add(half, Tensor(np.full(half.shape, 0.5)))
