"""Tiny layer toolkit: parameter containers, conv and linear layers."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules, in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.ShapeError("load_state_dict", p.shape, arr.shape, detail=k)
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def frozen_copy(self) -> "Module":
        """Deep copy whose parameters no longer track gradients."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad = False
            p.grad = None
        object.__setattr__(clone, "frozen", True)
        return clone

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3, stride: int = 1, zero: bool = False, dtype=np.float64):
        super().__init__()
        self.stride = stride
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            # He-uniform
            bound = np.sqrt(6.0 / (cin * k * k))
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.weight = _param(w.astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        bound = np.sqrt(6.0 / fin)
        self.weight = _param(rng.uniform(-bound, bound, size=(fin, fout)).astype(dtype))
        self.bias = _param(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias
