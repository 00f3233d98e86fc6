"""Small dense building blocks shared by the model variants."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = ["Linear", "MLP"]


class Linear:
    """Affine map on row vectors: [n, fan_in] -> [n, fan_out]."""

    def __init__(self, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, dtype=np.float64):
        w, b = T.init_linear(rng, fan_in, fan_out, dtype)
        self.w = Parameter(name + ".w", w)
        self.b = Parameter(name + ".b", b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w.value) + self.b.value


class MLP:
    """Dense stack with a fixed activation between layers (none after last).

    ``hidden`` lists the hidden widths; an empty list gives a single affine
    layer.
    """

    def __init__(self, name: str, fan_in: int, hidden: list[int], fan_out: int,
                 rng: np.random.Generator, act: str = "relu", dtype=np.float64):
        dims = [fan_in] + list(hidden) + [fan_out]
        self.layers = [
            Linear(f"{name}.{i}", dims[i], dims[i + 1], rng, dtype)
            for i in range(len(dims) - 1)
        ]
        self.act = act

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.activation(x, self.act)
        return x
