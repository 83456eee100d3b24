"""
Image encoder (three-stage strided 3D conv pyramid with E3D-MSCA + BFPU) and the classifier head
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .batches import VolumeBatch
from .config import ModelConfig
from .e3d_msca import BfpuParams, E3dMscaParams, bfpu_fuse, e3d_msca_forward
from .errors import ConfigurationError
from .functional import Conv3dSpec, dropout, global_pool3d, relu, resize_nearest3d, sigmoid
from .nn import Conv3dLayer, Initializer, Linear
from .tensor import Tensor

logger = logging.getLogger(__name__)


def stage_grids(
    geometry: tuple[int, int, int], strides: tuple[tuple[int, int, int], ...], kernel: int = 3
) -> list[tuple[int, int, int]]:
    """Grid after each 3x3x3 (pad 1) strided stage; (12,192,192) -> (6,48,48), (3,24,24), (2,12,12)."""
    grids = []
    grid = tuple(geometry)
    for stride in strides:
        grid = Conv3dSpec(1, 1, kernel, stride=stride, padding=kernel // 2).output_grid(grid)
        grids.append(grid)
    return grids


@dataclass
class BackboneParams:
    stages: list[Conv3dLayer]
    attention: list[E3dMscaParams]  # one per level, empty when E3D-MSCA is ablated
    bfpu: list[BfpuParams]  # [P2 <- P3, P1 <- merged]
    reduce: list[Conv3dLayer]  # 1x1x1 projections after each BFPU
    head: Linear  # pooled features -> feature_dim
    geometry: tuple[int, int, int]
    dropout: float

    @property
    def feature_dim(self) -> int:
        return self.head.out_features

    @classmethod
    def create(cls, cfg: ModelConfig, init: Initializer) -> BackboneParams:
        c1, c2, c3 = cfg.backbone_channels
        grids = stage_grids(cfg.geometry, cfg.stage_strides)
        volumes = [int(np.prod(cfg.geometry))] + [int(np.prod(g)) for g in grids]
        if any(a <= b for a, b in zip(volumes, volumes[1:])):
            raise ConfigurationError(f"stage grids {grids} do not shrink for input geometry {cfg.geometry}")
        stages = [
            init.conv3d(Conv3dSpec(cin, cout, 3, stride=s, padding=1))
            for cin, cout, s in zip((1, c1, c2), (c1, c2, c3), cfg.stage_strides, strict=True)
        ]
        attention = []
        if cfg.use_e3d_msca:
            attention = [
                E3dMscaParams.create(c, init, cfg.cab_reduction, cfg.sab_kernel, cfg.dcfb_kernels) for c in (c1, c2, c3)
            ]
        r = cfg.bfpu_channels
        bfpu = [BfpuParams.create(c2, c3, init, cfg.bfpu_kernel), BfpuParams.create(c1, r, init, cfg.bfpu_kernel)]
        reduce = [init.conv3d(Conv3dSpec(c2 + c3, r, 1)), init.conv3d(Conv3dSpec(c1 + r, r, 1))]
        return cls(
            stages=stages,
            attention=attention,
            bfpu=bfpu,
            reduce=reduce,
            head=init.linear(r, cfg.feature_dim),
            geometry=tuple(cfg.geometry),
            dropout=cfg.dropout if cfg.use_dropout else 0.0,
        )


def image_encode(
    v: VolumeBatch | Tensor,
    p: BackboneParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    trace: dict[str, Any] | None = None,
) -> Tensor:
    """
    [B,1,D,H,W] -> [B, feature_dim].

    Stages produce P1, P2, P3; E3D-MSCA refines each level; P3 is resized onto P2's grid and
    BFPU-fused, reduced, resized onto P1's grid, fused with P1 and reduced again; then global
    average pooling, the linear head and (train mode only) dropout.
    """
    x = Tensor(v.volumes) if isinstance(v, VolumeBatch) else v
    if x.ndim != 5 or tuple(x.shape[1:]) != (1, *p.geometry):
        raise ConfigurationError(f"image encoder expects [B,1,{','.join(map(str, p.geometry))}], got {x.shape}")

    levels = []
    h = x
    for stage in p.stages:
        h = relu(stage(h))
        levels.append(h)
    for i, attn in enumerate(p.attention):
        level_trace = None if trace is None else trace.setdefault(f"level{i + 1}", {})
        levels[i] = e3d_msca_forward(levels[i], attn, level_trace)

    p1, p2, p3 = levels
    merged = p.reduce[0](bfpu_fuse(p2, resize_nearest3d(p3, p2.shape[2:]), p.bfpu[0]))
    merged = p.reduce[1](bfpu_fuse(p1, resize_nearest3d(merged, p1.shape[2:]), p.bfpu[1]))
    pooled = global_pool3d(merged, "avg").reshape(x.shape[0], -1)
    return dropout(p.head(pooled), p.dropout, rng, train_mode)


def logits(fused: Tensor, head: Linear) -> Tensor:
    if head.out_features != 1:
        raise ConfigurationError(f"classifier head must produce one logit, has {head.out_features}")
    return head(fused).reshape(fused.shape[0])


def classify(fused: Tensor, head: Linear) -> Tensor:
    """sigmoid(linear(fused)) -> probabilities [B]."""
    return sigmoid(logits(fused, head))
