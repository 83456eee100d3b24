"""
Multiscale cross attention (MSCA) fusion of image and tabular feature vectors

1. Inverted pyramid: both modality vectors are linearly projected 256 -> 128 -> 64 (each level
   from the previous one) and every level vector is chunked into tokens of width token_dim.
2. Per level, bidirectional multi-head cross attention (image queries tabular and tabular
   queries image); the two directions are flattened and summed.
3. BSF merges levels pairwise: align both to a common width, weight dimensions by
   softmax(u' * v'), then out = w * (u' + v') * d_out / 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from .errors import ConfigurationError, DimensionError
from .functional import matmul, softmax
from .nn import Initializer, Linear
from .tensor import Tensor

PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class PyramidLevel:
    dim: int
    token_count: int
    token_dim: int


@dataclass
class ScalePyramid:
    levels: list[PyramidLevel]
    img_proj: list[Linear]
    tab_proj: list[Linear]

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ConfigurationError(f"scale pyramid needs exactly {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        dims = [lv.dim for lv in self.levels]
        if any(a <= b for a, b in zip(dims, dims[1:])):
            raise ConfigurationError(f"pyramid dims must be strictly decreasing, got {dims}")
        for lv in self.levels:
            if lv.token_count * lv.token_dim != lv.dim:
                raise ConfigurationError(f"level {lv}: token_count * token_dim must equal dim")
        for projections in (self.img_proj, self.tab_proj):
            if len(projections) != PYRAMID_LEVELS:
                raise ConfigurationError("one projection per level and modality is required")
            for s, proj in enumerate(projections):
                if proj.out_features != dims[s] or (s > 0 and proj.in_features != dims[s - 1]):
                    raise ConfigurationError(f"projection {s} has shape {proj.weight.shape}, breaks the pyramid {dims}")

    @property
    def input_dim(self) -> int:
        return self.img_proj[0].in_features

    @classmethod
    def create(
        cls, init: Initializer, dims: tuple[int, ...] = (256, 128, 64), token_dim: int = 16, input_dim: int | None = None
    ) -> ScalePyramid:
        levels = [PyramidLevel(d, d // token_dim, token_dim) for d in dims]
        ins = [input_dim or dims[0], *dims[:-1]]
        return cls(
            levels=levels,
            img_proj=[init.linear(i, o) for i, o in zip(ins, dims, strict=True)],
            tab_proj=[init.linear(i, o) for i, o in zip(ins, dims, strict=True)],
        )


@dataclass
class CrossAttnParams:
    w_q: Tensor  # [D_q, D_q]
    w_k: Tensor  # [D_kv, D_q]
    w_v: Tensor  # [D_kv, D_q]
    heads: int

    def __post_init__(self):
        d_q = self.w_q.shape[1]
        if self.w_q.shape != (d_q, d_q) or self.w_k.shape[1] != d_q or self.w_v.shape != self.w_k.shape:
            raise ConfigurationError(
                f"attention projections disagree: W_q {self.w_q.shape}, W_k {self.w_k.shape}, W_v {self.w_v.shape}"
            )
        if self.heads < 1 or d_q % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide D_q={d_q}")

    @property
    def d_q(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_kv(self) -> int:
        return self.w_k.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_q // self.heads

    @classmethod
    def create(cls, init: Initializer, d_q: int, d_kv: int, heads: int) -> CrossAttnParams:
        if heads < 1 or d_q % heads:
            raise ConfigurationError(f"{heads} heads do not divide D_q={d_q}")
        return cls(
            w_q=init.weight((d_q, d_q), d_q),
            w_k=init.weight((d_kv, d_q), d_kv),
            w_v=init.weight((d_kv, d_q), d_kv),
            heads=heads,
        )


@dataclass
class BsfParams:
    align_a: Linear
    align_b: Linear

    def __post_init__(self):
        if self.align_a.out_features != self.align_b.out_features:
            raise ConfigurationError("BSF aligners must produce the same width")

    @property
    def out_dim(self) -> int:
        return self.align_a.out_features

    @classmethod
    def create(cls, init: Initializer, d_u: int, d_v: int, d_out: int) -> BsfParams:
        return cls(align_a=init.linear(d_u, d_out), align_b=init.linear(d_v, d_out))


@dataclass
class MscaParams:
    pyramid: ScalePyramid
    img2tab: list[CrossAttnParams]
    tab2img: list[CrossAttnParams]
    bsf: list[BsfParams]

    @property
    def out_dim(self) -> int:
        return self.bsf[-1].out_dim

    @classmethod
    def create(
        cls,
        init: Initializer,
        dims: tuple[int, ...] = (256, 128, 64),
        token_dim: int = 16,
        heads: int = 4,
        out_dim: int | None = None,
    ) -> MscaParams:
        out_dim = out_dim or dims[0]
        pyramid = ScalePyramid.create(init, dims, token_dim)
        return cls(
            pyramid=pyramid,
            img2tab=[CrossAttnParams.create(init, token_dim, token_dim, heads) for _ in dims],
            tab2img=[CrossAttnParams.create(init, token_dim, token_dim, heads) for _ in dims],
            bsf=[
                BsfParams.create(init, dims[0], dims[1], out_dim),
                BsfParams.create(init, out_dim, dims[2], out_dim),
            ],
        )


def to_tokens(feat: Tensor, token_dim: int) -> Tensor:
    """[B, dim] -> [B, dim / token_dim, token_dim]."""
    b, dim = feat.shape
    if dim % token_dim:
        raise ConfigurationError(f"token width {token_dim} does not divide feature dim {dim}")
    return feat.reshape(b, dim // token_dim, token_dim)


def pyramid_project(img_feat: Tensor, tab_feat: Tensor, p: ScalePyramid) -> list[tuple[Tensor, Tensor]]:
    """Consecutive projections of both modalities, returned as (img_tokens, tab_tokens) per level."""
    for name, feat in (("image", img_feat), ("tabular", tab_feat)):
        if feat.ndim != 2 or feat.shape[1] != p.input_dim:
            raise ConfigurationError(f"{name} features have shape {feat.shape}, pyramid expects [B,{p.input_dim}]")
    pairs = []
    a, b = img_feat, tab_feat
    for level, proj_a, proj_b in zip(p.levels, p.img_proj, p.tab_proj, strict=True):
        a, b = proj_a(a), proj_b(b)
        pairs.append((to_tokens(a, level.token_dim), to_tokens(b, level.token_dim)))
    return pairs


def split_heads(t: Tensor, heads: int) -> Tensor:
    """[B, N, H*C] -> [B, H, N, C]; head h owns columns h*C .. (h+1)*C - 1."""
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(t: Tensor) -> Tensor:
    b, h, n, c = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * c)


def attention_logits(q_h: Tensor, k_h: Tensor) -> Tensor:
    """Q_h K_h^T / sqrt(C) -> [B, H, N, M]."""
    return matmul(q_h, k_h.transpose(0, 1, 3, 2)) / math.sqrt(q_h.shape[-1])


def cross_attention(
    q_tokens: Tensor, kv_tokens: Tensor, p: CrossAttnParams, trace: dict[str, Any] | None = None
) -> Tensor:
    if q_tokens.ndim != 3 or kv_tokens.ndim != 3 or q_tokens.shape[0] != kv_tokens.shape[0]:
        raise DimensionError(f"cross attention expects [B,N,D_q] and [B,M,D_kv], got {q_tokens.shape}, {kv_tokens.shape}")
    if q_tokens.shape[2] != p.d_q or kv_tokens.shape[2] != p.d_kv:
        raise DimensionError(
            f"token widths {q_tokens.shape[2]}/{kv_tokens.shape[2]} do not match D_q={p.d_q}, D_kv={p.d_kv}"
        )
    q_h = split_heads(matmul(q_tokens, p.w_q), p.heads)
    k_h = split_heads(matmul(kv_tokens, p.w_k), p.heads)
    v_h = split_heads(matmul(kv_tokens, p.w_v), p.heads)
    weights = softmax(attention_logits(q_h, k_h), axis=-1)
    if trace is not None:
        trace["weights"] = weights.data.copy()
    return merge_heads(matmul(weights, v_h))


def fuse_scale(img_tokens: Tensor, tab_tokens: Tensor, p_img2tab: CrossAttnParams, p_tab2img: CrossAttnParams) -> Tensor:
    """Both attention directions at one level, flattened to [B, dim] and summed."""
    if img_tokens.shape != tab_tokens.shape:
        raise ConfigurationError(f"token sets come from different levels: {img_tokens.shape} vs {tab_tokens.shape}")
    b = img_tokens.shape[0]
    o1 = cross_attention(img_tokens, tab_tokens, p_img2tab)
    o2 = cross_attention(tab_tokens, img_tokens, p_tab2img)
    return o1.reshape(b, -1) + o2.reshape(b, -1)


def bsf_merge(u: Tensor, v: Tensor, p: BsfParams, trace: dict[str, Any] | None = None) -> Tensor:
    if u.ndim != 2 or v.ndim != 2 or u.shape[0] != v.shape[0]:
        raise DimensionError(f"BSF expects [B,d_u] and [B,d_v], got {u.shape}, {v.shape}")
    if u.shape[1] != p.align_a.in_features or v.shape[1] != p.align_b.in_features:
        raise DimensionError(
            f"BSF aligners take {p.align_a.in_features}/{p.align_b.in_features}, got {u.shape[1]}/{v.shape[1]}"
        )
    u_al, v_al = p.align_a(u), p.align_b(v)
    importance = softmax(u_al * v_al, axis=-1)
    if trace is not None:
        trace["importance"] = importance.data.copy()
    return importance * (u_al + v_al) * (p.out_dim / 2.0)


def msca_forward(img_feat: Tensor, tab_feat: Tensor, p: MscaParams) -> Tensor:
    pairs = pyramid_project(img_feat, tab_feat, p.pyramid)
    fused = [fuse_scale(a, b, p.img2tab[s], p.tab2img[s]) for s, (a, b) in enumerate(pairs)]
    merged = bsf_merge(fused[0], fused[1], p.bsf[0])
    return bsf_merge(merged, fused[2], p.bsf[1])
