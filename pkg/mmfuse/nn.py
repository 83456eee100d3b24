"""
Parameter containers, initialization and state dicts

Parameter structs are plain dataclasses holding Tensors (possibly nested, or in lists and
dicts). `named_parameters` walks them in field order, which is the order checkpoints and the
optimizer use.
"""
from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Literal

import numpy as np

from .errors import DataError, DimensionError
from .functional import Conv3dSpec, conv3d, linear
from .tensor import Tensor

InitMode = Literal["uniform", "zeros"]


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor | None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear expects last extent {self.in_features}, got {x.shape}")
        return linear(x, self.weight, self.bias)


@dataclass
class Conv3dLayer:
    spec: Conv3dSpec
    weight: Tensor
    bias: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)


class Initializer:
    """Seeded parameter factory: uniform in ±gain*sqrt(1/fan_in) for weights, zero biases."""

    def __init__(self, seed: int | np.random.Generator = 0, mode: InitMode = "uniform"):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.mode = mode

    def weight(self, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
        if self.mode == "zeros":
            return Tensor(np.zeros(shape), requires_grad=True)
        bound = gain * np.sqrt(1.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def bias(self, n: int) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    def linear(self, n_in: int, n_out: int, bias: bool = True) -> Linear:
        return Linear(self.weight((n_in, n_out), n_in), self.bias(n_out) if bias else None)

    def conv3d(self, spec: Conv3dSpec, bias: bool = True) -> Conv3dLayer:
        return Conv3dLayer(spec, self.weight(spec.weight_shape, spec.fan_in), self.bias(spec.out_channels) if bias else None)


def named_parameters(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list | tuple):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))


def parameters(obj: Any) -> list[Tensor]:
    return [p for _, p in named_parameters(obj)]


def zero_grad(obj: Any) -> None:
    for p in parameters(obj):
        p.zero_grad()


def state_dict(obj: Any) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in named_parameters(obj)}


def load_state_dict(obj: Any, state: dict[str, np.ndarray]) -> None:
    """Replace parameter data in place of the struct; names and shapes must match exactly."""
    params = dict(named_parameters(obj))
    missing = sorted(set(params) - set(state))
    unexpected = sorted(set(state) - set(params))
    if missing or unexpected:
        raise DataError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, p in params.items():
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != p.shape:
            raise DataError(f"state dict entry {name}: shape {arr.shape} != parameter shape {p.shape}")
        p.data = arr.copy()
        p.grad = None
