"""Named, ordered registry of trainable tensors.

Every model owns one ``ParamStore``.  Parameters are created in a fixed
order during model construction, drawn from the store's generator in
float64 and then cast to the store dtype, so a given seed produces the
same initial weights regardless of training precision.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


class ParamStore:
    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self._rng = rng
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape, low: float, high: float) -> Tensor:
        return self._register(name, self._rng.uniform(low, high, size=shape))

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self._register(name, self._rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape, dtype=np.float64))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape, dtype=np.float64))

    def fan_in_uniform(self, name: str, shape, fan_in: int) -> Tensor:
        """Standard +-1/sqrt(fan_in) init for weights and their biases."""
        bound = 1.0 / np.sqrt(fan_in)
        return self.uniform(name, shape, -bound, bound)

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self, prefix: str = "") -> int:
        """Total scalar count across parameters whose name starts with prefix."""
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def freeze(self, name: str) -> None:
        self.get(name).requires_grad = False
