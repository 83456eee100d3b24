"""
E3D-MSCA attention stack and the BFPU two-scale fuser

E3D-MSCA(x) = DCFB(SAB(CAB(x))) on a [B,C,D,H,W] pyramid level:
  CAB  - channel gate from a shared MLP over global avg- and max-pooled descriptors
  SAB  - spatial gate from a k^3 conv over the channel-mean and channel-max maps
  DCFB - residual sum of depthwise convs (kernels 1,3,5 by default) + pointwise projection

BFPU fuses two levels on the same grid:
  F_mid = sigmoid(conv_a(F_a) * conv_b(F_b))
  out   = [F_a + F_mid * F_a, F_b + F_mid' * F_b]    (channel concat)
where F_mid' is F_mid averaged over channels when F_b has a different channel count.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .errors import ConfigurationError, DimensionError
from .functional import Conv3dSpec, global_pool3d, matmul, relu, sigmoid
from .nn import Conv3dLayer, Initializer
from .tensor import Tensor, concat

Trace = dict[str, Any] | None


@dataclass
class CabParams:
    mlp_w1: Tensor  # [C, C/r]
    mlp_w2: Tensor  # [C/r, C]
    reduction_ratio: int


@dataclass
class SabParams:
    conv: Conv3dLayer  # 2 -> 1 channels


@dataclass
class DcfbParams:
    branches: list[Conv3dLayer]  # depthwise, channel-preserving
    pointwise: Conv3dLayer  # 1x1x1, C -> C


@dataclass
class E3dMscaParams:
    cab: CabParams
    sab: SabParams
    dcfb: DcfbParams

    def __post_init__(self):
        c = self.channels
        r = self.cab.reduction_ratio
        if r < 1 or c % r or self.cab.mlp_w1.shape != (c, c // r) or self.cab.mlp_w2.shape != (c // r, c):
            raise ConfigurationError(f"CAB MLP must map {c} -> {c}/{r} -> {c}")
        if self.sab.conv.spec.in_channels != 2 or self.sab.conv.spec.out_channels != 1:
            raise ConfigurationError("SAB conv must map the 2 pooled maps to 1 gate channel")
        for branch in self.dcfb.branches:
            if not (branch.spec.depthwise and branch.spec.in_channels == c):
                raise ConfigurationError(f"DCFB branches must be depthwise over {c} channels")
        pw = self.dcfb.pointwise.spec
        if (pw.in_channels, pw.out_channels, pw.kernel) != (c, c, (1, 1, 1)):
            raise ConfigurationError(f"DCFB pointwise projection must be 1x1x1 {c} -> {c}")

    @property
    def channels(self) -> int:
        return self.cab.mlp_w1.shape[0]

    @classmethod
    def create(
        cls,
        channels: int,
        init: Initializer,
        reduction_ratio: int = 16,
        sab_kernel: int = 7,
        dcfb_kernels: tuple[int, ...] = (1, 3, 5),
    ) -> E3dMscaParams:
        if reduction_ratio < 1 or channels % reduction_ratio:
            raise ConfigurationError(f"reduction ratio {reduction_ratio} must divide {channels}")
        hidden = channels // reduction_ratio
        cab = CabParams(
            mlp_w1=init.weight((channels, hidden), channels),
            mlp_w2=init.weight((hidden, channels), hidden),
            reduction_ratio=reduction_ratio,
        )
        sab = SabParams(conv=init.conv3d(Conv3dSpec.same(2, 1, sab_kernel)))
        dcfb = DcfbParams(
            branches=[init.conv3d(Conv3dSpec.same(channels, channels, k, groups=channels)) for k in dcfb_kernels],
            pointwise=init.conv3d(Conv3dSpec.same(channels, channels, 1)),
        )
        return cls(cab=cab, sab=sab, dcfb=dcfb)


def _check_rank5(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{what} expects [B,C,D,H,W], got {x.shape}")


def _shared_mlp(v: Tensor, cab: CabParams) -> Tensor:
    return matmul(relu(matmul(v, cab.mlp_w1)), cab.mlp_w2)


def cab3d_forward(x: Tensor, p: E3dMscaParams, trace: Trace = None) -> Tensor:
    _check_rank5(x, "CAB")
    b, c = x.shape[:2]
    if c != p.channels:
        raise DimensionError(f"CAB: input has {c} channels, parameters expect {p.channels}")
    avg = global_pool3d(x, "avg").reshape(b, c)
    peak = global_pool3d(x, "max").reshape(b, c)
    gate = sigmoid(_shared_mlp(avg, p.cab) + _shared_mlp(peak, p.cab)).reshape(b, c, 1, 1, 1)
    if trace is not None:
        trace["cab"] = gate.data.reshape(b, c).copy()
    return x * gate


def sab3d_forward(x: Tensor, p: E3dMscaParams, trace: Trace = None) -> Tensor:
    _check_rank5(x, "SAB")
    pooled = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    gate = sigmoid(p.sab.conv(pooled))
    if trace is not None:
        trace["sab"] = gate.data[:, 0].copy()
    return x * gate


def dcfb3d_forward(x: Tensor, p: E3dMscaParams) -> Tensor:
    _check_rank5(x, "DCFB")
    if x.shape[1] != p.channels:
        raise DimensionError(f"DCFB: input has {x.shape[1]} channels, parameters expect {p.channels}")
    fused = p.dcfb.branches[0](x)
    for branch in p.dcfb.branches[1:]:
        fused = fused + branch(x)
    return x + p.dcfb.pointwise(fused)


def e3d_msca_forward(x: Tensor, p: E3dMscaParams, trace: Trace = None) -> Tensor:
    _check_rank5(x, "E3D-MSCA")
    return dcfb3d_forward(sab3d_forward(cab3d_forward(x, p, trace), p, trace), p)


@dataclass
class BfpuParams:
    conv_a: Conv3dLayer  # C_a -> C_a
    conv_b: Conv3dLayer  # C_b -> C_a

    def __post_init__(self):
        a, b = self.conv_a.spec, self.conv_b.spec
        if a.in_channels != a.out_channels:
            raise ConfigurationError("BFPU conv_a must preserve the F_a channel count")
        if b.out_channels != a.out_channels:
            raise ConfigurationError("BFPU conv_b must project F_b onto the F_a channel count")

    @classmethod
    def create(cls, channels_a: int, channels_b: int, init: Initializer, kernel: int = 3) -> BfpuParams:
        return cls(
            conv_a=init.conv3d(Conv3dSpec.same(channels_a, channels_a, kernel)),
            conv_b=init.conv3d(Conv3dSpec.same(channels_b, channels_a, kernel)),
        )


def bfpu_mid(f_a: Tensor, f_b: Tensor, p: BfpuParams) -> Tensor:
    """F_mid = sigmoid(conv_a(F_a) * conv_b(F_b)), [B, C_a, D, H, W]."""
    _check_rank5(f_a, "BFPU")
    _check_rank5(f_b, "BFPU")
    if f_a.shape[0] != f_b.shape[0] or f_a.shape[2:] != f_b.shape[2:]:
        raise DimensionError(
            f"BFPU inputs must share batch and grid: {f_a.shape} vs {f_b.shape}; resize F_b to F_a's grid first"
        )
    return sigmoid(p.conv_a(f_a) * p.conv_b(f_b))


def bfpu_fuse(f_a: Tensor, f_b: Tensor, p: BfpuParams, trace: Trace = None) -> Tensor:
    mid = bfpu_mid(f_a, f_b, p)
    gate_b = mid if f_b.shape[1] == f_a.shape[1] else mid.mean(axis=1, keepdims=True)
    if trace is not None:
        trace["f_mid"] = mid.data.copy()
    return concat([f_a + mid * f_a, f_b + gate_b * f_b], axis=1)
