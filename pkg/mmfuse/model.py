"""
Full network - both encoders, the fusion strategy of the configured mode and the head(s)

Both branch feature vectors and every fused vector are layer-normalized before they meet the
other modality or a classifier head.

Modes:
  msca            - multiscale cross attention + BSF, then the head
  cross_attention - a single bidirectional fuse_scale at feature_dim, no pyramid or BSF
  late_fusion     - one head per modality; the logits are averaged
  image_only      - image encoder and head, no tabular branch
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import encoders, kan, msca_fusion
from .batches import TabularBatch, VolumeBatch
from .config import ModelConfig
from .functional import layer_norm, sigmoid
from .msca_fusion import CrossAttnParams, MscaParams
from .nn import Initializer, Linear
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class FusionModel:
    image: encoders.BackboneParams
    tabular: kan.TabularEncoderParams | None
    msca: MscaParams | None
    cross: list[CrossAttnParams] | None  # [image->tabular, tabular->image]
    head: Linear
    tab_head: Linear | None
    mode: str
    token_dim: int

    @classmethod
    def create(cls, cfg: ModelConfig, columns: Sequence[str], seed: int | np.random.Generator = 0, init_mode="uniform") -> FusionModel:
        init = Initializer(seed, init_mode)
        mode = cfg.fusion_mode
        image = encoders.BackboneParams.create(cfg, init)
        tabular = None
        if mode != "image_only":
            tabular = kan.TabularEncoderParams.create(
                columns, init, cfg.kan_hidden, cfg.feature_dim, cfg.kan_grid, cfg.kan_degree, cfg.kan_range
            )
        msca = None
        if mode == "msca":
            msca = MscaParams.create(init, cfg.pyramid_dims, cfg.token_dim, cfg.heads, cfg.feature_dim)
        cross = None
        if mode == "cross_attention":
            cross = [CrossAttnParams.create(init, cfg.token_dim, cfg.token_dim, cfg.heads) for _ in range(2)]
        head = init.linear(cfg.feature_dim, 1)
        tab_head = init.linear(cfg.feature_dim, 1) if mode == "late_fusion" else None
        return cls(image, tabular, msca, cross, head, tab_head, mode, cfg.token_dim)

    def forward_logits(
        self,
        volumes: VolumeBatch | Tensor,
        tabular: TabularBatch | Tensor | None,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        img = layer_norm(encoders.image_encode(volumes, self.image, train_mode, rng, trace))
        if self.mode == "image_only":
            return encoders.logits(img, self.head)
        tab = layer_norm(kan.tabular_encode(tabular, self.tabular))
        if self.mode == "late_fusion":
            return (encoders.logits(img, self.head) + encoders.logits(tab, self.tab_head)) * 0.5
        if self.mode == "cross_attention":
            fused = msca_fusion.fuse_scale(
                msca_fusion.to_tokens(img, self.token_dim),
                msca_fusion.to_tokens(tab, self.token_dim),
                self.cross[0],
                self.cross[1],
            )
            return encoders.logits(layer_norm(fused), self.head)
        return encoders.logits(layer_norm(msca_fusion.msca_forward(img, tab, self.msca)), self.head)

    def predict_proba(self, volumes, tabular, train_mode: bool = False, rng=None) -> Tensor:
        return sigmoid(self.forward_logits(volumes, tabular, train_mode, rng))
