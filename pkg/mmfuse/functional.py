"""
Functional ops - matmul, 3D convolution, pooling, activations, layer norm, resize, dropout
"""
from __future__ import annotations

import itertools
import logging
import threading
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit

from .config import KERNEL_THREADS
from .errors import ConfigurationError, DimensionError
from .tensor import Function, Tensor, as_tensor, clip, unbroadcast

logger = logging.getLogger(__name__)

_executor: ThreadPoolExecutor | None = None
_executor_lock = threading.Lock()


def kernel_pool() -> ThreadPoolExecutor:
    """The shared conv3d worker pool, built once on first use."""
    global _executor
    if _executor is None:
        with _executor_lock:
            if _executor is None:
                _executor = ThreadPoolExecutor(max_workers=KERNEL_THREADS, thread_name_prefix="mmfuse-kernel")
    return _executor


def _batch_map(fn: Callable[[slice], np.ndarray], batch: int) -> np.ndarray:
    """Run `fn` over batch chunks (one per kernel thread) and stitch the results along axis 0."""
    workers = min(KERNEL_THREADS, batch)
    if workers <= 1:
        return fn(slice(0, batch))
    bounds = np.linspace(0, batch, workers + 1).astype(int)
    chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:], strict=True)]
    return np.concatenate(list(kernel_pool().map(fn, chunks)), axis=0)


# *** matmul ***
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as e:
            raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from e
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is stored [in, out]."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# *** activations ***
class Sigmoid(Function):
    def forward(self, a):
        self.out = expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


class Softmax(Function):
    def forward(self, a, axis: int):
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class LayerNorm(Function):
    def forward(self, a, eps: float):
        centered = a - a.mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
        self.out = centered * self.inv_std
        return self.out

    def backward(self, grad):
        g_mean = grad.mean(axis=-1, keepdims=True)
        gy_mean = (grad * self.out).mean(axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - self.out * gy_mean),)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis: (x - mean) / sqrt(var + eps), no affine terms."""
    if x.ndim < 1 or x.shape[-1] < 2:
        raise DimensionError(f"layer norm needs at least two features on the last axis, got {x.shape}")
    return LayerNorm.apply(x, eps=eps)


# *** 3D convolution ***
def _triple(value: int | tuple[int, int, int]) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    if len(value) != 3:
        raise ConfigurationError(f"expected an int or a triple, got {value!r}")
    return (int(value[0]), int(value[1]), int(value[2]))


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(f"invalid kernel/stride/padding in {self}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"groups={self.groups} must divide in_channels={self.in_channels} and out_channels={self.out_channels}"
            )

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int, groups: int = 1) -> Conv3dSpec:
        """Stride-1 spec whose zero padding keeps the spatial grid (odd kernels)."""
        return cls(in_channels, out_channels, (kernel,) * 3, padding=(kernel // 2,) * 3, groups=groups)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * int(np.prod(self.kernel))

    def output_grid(self, grid: tuple[int, ...]) -> tuple[int, int, int]:
        out = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(grid, self.kernel, self.stride, self.padding, strict=True)
        )
        if min(out) < 1:
            raise ConfigurationError(f"conv3d output grid {out} from input grid {tuple(grid)} is empty ({self})")
        return out  # type: ignore[return-value]


class Conv3d(Function):
    """Direct cross-correlation with zero padding, accumulated one kernel offset at a time."""

    def forward(self, x, w, b, spec: Conv3dSpec):
        self.spec = spec
        self.out_grid = spec.output_grid(x.shape[2:])
        pd, ph, pw = spec.padding
        self.xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        self.x_shape = x.shape
        g = spec.groups
        self.wg = w.reshape(g, spec.out_channels // g, spec.in_channels // g, *spec.kernel)
        out = _batch_map(self._forward_chunk, x.shape[0])
        return out + b.reshape(1, -1, 1, 1, 1)

    def _windows(self):
        (od, oh, ow), (sd, sh, sw) = self.out_grid, self.spec.stride
        for a, b, c in itertools.product(*(range(k) for k in self.spec.kernel)):
            yield (a, b, c), (
                slice(a, a + sd * (od - 1) + 1, sd),
                slice(b, b + sh * (oh - 1) + 1, sh),
                slice(c, c + sw * (ow - 1) + 1, sw),
            )

    def _grouped(self, arr: np.ndarray) -> np.ndarray:
        g = self.spec.groups
        return arr.reshape(arr.shape[0], g, arr.shape[1] // g, *arr.shape[2:])

    def _forward_chunk(self, rows: slice) -> np.ndarray:
        xg = self._grouped(self.xp[rows])
        n, g = xg.shape[0], self.spec.groups
        out = np.zeros((n, g, self.wg.shape[1], int(np.prod(self.out_grid))))
        for (a, b, c), window in self._windows():
            patch = xg[(slice(None),) * 3 + window].reshape(n, g, xg.shape[2], -1)
            out += np.matmul(self.wg[:, :, :, a, b, c], patch)
        return out.reshape(n, self.spec.out_channels, *self.out_grid)

    def _input_grad_chunk(self, rows: slice) -> np.ndarray:
        gout = self._grouped(self.grad[rows])
        n, g = gout.shape[0], self.spec.groups
        gout = gout.reshape(n, g, gout.shape[2], -1)
        dxg = np.zeros((n, g, self.wg.shape[2], *self.xp.shape[2:]))
        for (a, b, c), window in self._windows():
            contrib = np.matmul(np.swapaxes(self.wg[:, :, :, a, b, c], -1, -2), gout)
            dxg[(slice(None),) * 3 + window] += contrib.reshape(n, g, -1, *self.out_grid)
        return dxg.reshape(n, self.spec.in_channels, *self.xp.shape[2:])

    def backward(self, grad):
        self.grad = grad
        dxp = _batch_map(self._input_grad_chunk, grad.shape[0])
        pd, ph, pw = self.spec.padding
        D, H, W = self.x_shape[2:]
        dx = dxp[:, :, pd : pd + D, ph : ph + H, pw : pw + W]

        xg = self._grouped(self.xp)
        n, g = xg.shape[0], self.spec.groups
        gout = self._grouped(grad).reshape(n, g, self.wg.shape[1], -1)
        dwg = np.zeros_like(self.wg)
        for (a, b, c), window in self._windows():
            patch = xg[(slice(None),) * 3 + window].reshape(n, g, xg.shape[2], -1)
            dwg[:, :, :, a, b, c] = np.matmul(gout, np.swapaxes(patch, -1, -2)).sum(axis=0)
        db = grad.sum(axis=(0, 2, 3, 4))
        return dx, dwg.reshape(self.spec.weight_shape), db


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv3dSpec) -> Tensor:
    """3D cross-correlation of [B,Cin,D,H,W] with weight [Cout, Cin/groups, kd, kh, kw]."""
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects [B,C,D,H,W], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"conv3d: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise DimensionError(f"conv3d: weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is None:
        bias = Tensor(np.zeros(spec.out_channels))
    elif bias.shape != (spec.out_channels,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({spec.out_channels},)")
    return Conv3d.apply(x, weight, bias, spec=spec)


# *** pooling / resizing ***
def global_pool3d(x: Tensor, mode: Literal["avg", "max"] = "avg") -> Tensor:
    """Per-channel mean or max over D,H,W -> [B,C,1,1,1]."""
    if x.ndim != 5:
        raise DimensionError(f"global_pool3d expects [B,C,D,H,W], got {x.shape}")
    if mode == "avg":
        return x.mean(axis=(2, 3, 4), keepdims=True)
    if mode == "max":
        return x.max(axis=(2, 3, 4), keepdims=True)
    raise ConfigurationError(f"unknown pooling mode {mode!r}")


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


class ResizeNearest3d(Function):
    def forward(self, x, size: tuple[int, int, int]):
        self.x_shape = x.shape
        d, h, w = (_nearest_index(n, m) for n, m in zip(x.shape[2:], size, strict=True))
        self.index = (slice(None), slice(None), d[:, None, None], h[None, :, None], w[None, None, :])
        return x[self.index]

    def backward(self, grad):
        dx = np.zeros(self.x_shape)
        np.add.at(dx, self.index, grad)
        return (dx,)


def resize_nearest3d(x: Tensor, size: tuple[int, int, int]) -> Tensor:
    """Nearest-neighbour resize of the D,H,W grid (source index floor(i * in / out))."""
    if x.ndim != 5:
        raise DimensionError(f"resize_nearest3d expects [B,C,D,H,W], got {x.shape}")
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return ResizeNearest3d.apply(x, size=tuple(size))


# *** regularization ***
def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train_mode: bool) -> Tensor:
    """Inverted dropout; identity unless `train_mode` and p > 0."""
    if not train_mode or p <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in train mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep, copy=False)


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    return clip(as_tensor(x), low, high)
