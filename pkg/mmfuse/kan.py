"""
Kolmogorov-Arnold layers for the tabular encoder

Each edge (i -> j) carries phi_ij(x) = w_base[i,j] * silu(x) + sum_g c[i,g,j] * B_g(x), where B_g
are degree-k B-splines on a uniform knot grid over [-r, r] extended by k knots on each side.
Spline inputs are clamped to [-r, r]; the base term sees the raw input. Spline coefficients start
at a tenth of the base weights' range, so a fresh layer is close to its SiLU base.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .batches import TabularBatch
from .errors import ConfigurationError, DataError, DimensionError
from .functional import matmul, silu
from .nn import Initializer
from .tensor import Function, Tensor

SPLINE_INIT_SCALE = 0.1


def make_knots(grid: int, degree: int, bound: float) -> np.ndarray:
    """Uniform knots t_0..t_{grid+2*degree} with t_degree = -bound and t_{grid+degree} = bound."""
    if degree < 1 or grid < degree + 1 or bound <= 0:
        raise ConfigurationError(f"KAN grid needs degree >= 1, grid >= degree + 1, bound > 0 (got {degree}, {grid}, {bound})")
    h = 2.0 * bound / grid
    return -bound + (np.arange(grid + 2 * degree + 1) - degree) * h


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # repeated knots give 0/0 terms, which are 0 by convention
    return np.divide(num, den, out=np.zeros(np.broadcast_shapes(num.shape, den.shape)), where=den != 0)


def bspline_bases(x: np.ndarray, knots: np.ndarray, degree: int) -> list[np.ndarray]:
    """Cox-de Boor recursion; returns the basis arrays [..., len(knots)-1-d] for d = 0..degree."""
    xe = x[..., None]
    levels = [((xe >= knots[:-1]) & (xe < knots[1:])).astype(np.float64)]
    for d in range(1, degree + 1):
        prev = levels[-1]
        left = _ratio(xe - knots[: -(d + 1)], knots[d:-1] - knots[: -(d + 1)]) * prev[..., :-1]
        right = _ratio(knots[d + 1 :] - xe, knots[d + 1 :] - knots[1:-d]) * prev[..., 1:]
        levels.append(left + right)
    return levels


class SplineBasis(Function):
    """Clamp to the knot range, then evaluate all degree-k bases: [B, n] -> [B, n, n_basis]."""

    def forward(self, x, knots: np.ndarray, degree: int, low: float, high: float):
        self.inside = (x >= low) & (x <= high)
        levels = bspline_bases(np.clip(x, low, high), knots, degree)
        self.lower, self.knots, self.degree = levels[-2], knots, degree
        return levels[-1]

    def backward(self, grad):
        k, t = self.degree, self.knots
        left = _ratio(np.full(t.size - k - 1, float(k)), t[k:-1] - t[: -(k + 1)]) * self.lower[..., :-1]
        right = _ratio(np.full(t.size - k - 1, float(k)), t[k + 1 :] - t[1:-k]) * self.lower[..., 1:]
        return ((grad * (left - right)).sum(axis=-1) * self.inside,)


@dataclass
class KanLayerParams:
    base_weight: Tensor  # [n_in, n_out]
    spline_coef: Tensor  # [n_in, n_basis, n_out]
    knots: np.ndarray
    degree: int
    bound: float
    base_activation: Literal["silu", "identity"] = "silu"

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=np.float64)
        if t.ndim != 1 or np.any(np.diff(t) < 0):
            raise ConfigurationError("KAN knot vector must be one-dimensional and non-decreasing")
        if self.degree < 1 or t.size - self.degree - 1 < self.degree + 1:
            raise ConfigurationError(f"KAN knot vector of {t.size} knots is too short for degree {self.degree}")
        n_in, n_out = self.base_weight.shape
        if self.spline_coef.shape != (n_in, t.size - self.degree - 1, n_out):
            raise ConfigurationError(f"spline coefficients {self.spline_coef.shape} do not match {n_in} inputs, {n_out} outputs")
        self.knots = t

    @property
    def n_in(self) -> int:
        return self.base_weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.base_weight.shape[1]

    @property
    def n_basis(self) -> int:
        return self.spline_coef.shape[1]

    @classmethod
    def create(
        cls,
        n_in: int,
        n_out: int,
        init: Initializer,
        grid: int = 8,
        degree: int = 3,
        bound: float = 3.0,
        spline_scale: float = SPLINE_INIT_SCALE,
    ) -> KanLayerParams:
        knots = make_knots(grid, degree, bound)
        return cls(
            base_weight=init.weight((n_in, n_out), n_in),
            spline_coef=init.weight((n_in, grid + degree, n_out), n_in, gain=spline_scale),
            knots=knots,
            degree=degree,
            bound=bound,
        )


def spline_basis(x: Tensor, p: KanLayerParams) -> Tensor:
    return SplineBasis.apply(x, knots=p.knots, degree=p.degree, low=-p.bound, high=p.bound)


def kan_layer_forward(x: Tensor, p: KanLayerParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.n_in:
        raise DimensionError(f"KAN layer expects [B,{p.n_in}], got {x.shape}")
    b = x.shape[0]
    bases = spline_basis(x, p).reshape(b, p.n_in * p.n_basis)
    spline = matmul(bases, p.spline_coef.reshape(p.n_in * p.n_basis, p.n_out))
    base_in = silu(x) if p.base_activation == "silu" else x
    return spline + matmul(base_in, p.base_weight)


@dataclass
class TabularEncoderParams:
    layers: list[KanLayerParams]
    columns: tuple[str, ...]

    @classmethod
    def create(
        cls,
        columns: Sequence[str],
        init: Initializer,
        hidden: int = 64,
        out_dim: int = 256,
        grid: int = 8,
        degree: int = 3,
        bound: float = 3.0,
    ) -> TabularEncoderParams:
        widths = [len(columns), hidden, out_dim]
        layers = [KanLayerParams.create(i, o, init, grid, degree, bound) for i, o in zip(widths, widths[1:])]
        return cls(layers=layers, columns=tuple(columns))


def tabular_encode(t: TabularBatch | Tensor, p: TabularEncoderParams) -> Tensor:
    """Stacked KAN layers over the encoded clinical features -> [B, out_dim]."""
    if isinstance(t, TabularBatch):
        if t.columns != p.columns:
            for i, expected in enumerate(p.columns):
                got = t.columns[i] if i < len(t.columns) else "<missing>"
                if got != expected:
                    raise DataError(f"tabular column {i}: expected attribute '{expected}', got '{got}'")
            raise DataError(f"tabular batch has unexpected extra columns {t.columns[len(p.columns):]}")
        h = Tensor(t.features)
    else:
        h = t
    for layer in p.layers:
        h = kan_layer_forward(h, layer)
    return h
