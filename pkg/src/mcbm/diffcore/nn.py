"""Parameters and the small MLPs every model in the package is built from."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .functional import relu
from .rng import stream
from .tensor import Tensor, affine


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def init_parameter(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> Parameter:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), keyed on (seed, name)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Parameter(stream(seed, f"init/{name}").uniform(-bound, bound, size=shape), name)


class MLP:
    """Affine layers with ReLU between them (none after the last)."""

    def __init__(self, prefix: str, sizes: Sequence[int], seed: int):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = [int(s) for s in sizes]
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = init_parameter(seed, f"{prefix}.{i}.weight", (fan_in, fan_out), fan_in)
            b = init_parameter(seed, f"{prefix}.{i}.bias", (fan_out,), fan_in)
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = affine(h, w, b)
            if i < last:
                h = relu(h)
        return h

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    @staticmethod
    def count(sizes: Sequence[int]) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
