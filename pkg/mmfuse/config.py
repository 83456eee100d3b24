import hashlib
import os
import re
from pathlib import Path
from typing import Any, Literal

import orjson
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigurationError

ENV_VAR_PATTERN = re.compile(r"\$\{([A-Z0-9_]+)(?::([^}]*))?\}")

FusionMode = Literal["msca", "cross_attention", "late_fusion", "image_only"]
FUSION_MODES: tuple[str, ...] = ("msca", "cross_attention", "late_fusion", "image_only")


def _expand_env(value: str) -> str:
    def repl(match):
        name, default = match.group(1), match.group(2)
        return os.getenv(name, default or "")
    return ENV_VAR_PATTERN.sub(repl, value)


def load_config(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        raw = f.read()
    # expand ${ENV} before parsing; JSON files parse as YAML too
    expanded = _expand_env(raw)
    try:
        data = yaml.safe_load(expanded) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: not valid JSON/YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must define a mapping")
    return data


def _positive_int(value: str | None, default: int) -> int:
    try:
        return max(1, int(value)) if value else default
    except ValueError:
        return default


KERNEL_THREADS = _positive_int(os.getenv("MMFUSE_THREADS"), 1)
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OTEL_ENABLED = os.getenv("OTEL_ENABLED", "false").lower() in ("1", "true", "yes")
RUNS_DIR = os.getenv("MMFUSE_RUNS_DIR", "runs")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    """Every architectural hyperparameter of the fusion network."""

    geometry: tuple[int, int, int] = (12, 192, 192)
    backbone_channels: tuple[int, int, int] = (64, 128, 256)
    stage_strides: tuple[tuple[int, int, int], ...] = ((2, 4, 4), (2, 2, 2), (2, 2, 2))
    bfpu_channels: int = 128
    feature_dim: int = 256
    cab_reduction: int = 16
    sab_kernel: int = 7
    dcfb_kernels: tuple[int, ...] = (1, 3, 5)
    bfpu_kernel: int = 3
    pyramid_dims: tuple[int, int, int] = (256, 128, 64)
    token_dim: int = 16
    heads: int = 4
    kan_hidden: int = 64
    kan_degree: int = 3
    kan_grid: int = 8
    kan_range: float = 3.0
    dropout: float = 0.5
    use_e3d_msca: bool = True
    use_dropout: bool = True
    fusion_mode: FusionMode = "msca"

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if any(c < 1 for c in self.backbone_channels) or self.feature_dim < 1:
            raise ValueError("channel widths must be positive")
        if len(self.stage_strides) != 3:
            raise ValueError("stage_strides needs one stride triple per stage (3)")
        for c in self.backbone_channels:
            if self.cab_reduction < 1 or c % self.cab_reduction:
                raise ValueError(f"cab_reduction {self.cab_reduction} must divide channel width {c}")
        if self.sab_kernel % 2 == 0 or self.bfpu_kernel % 2 == 0:
            raise ValueError("sab_kernel and bfpu_kernel must be odd")
        if any(k % 2 == 0 or k < 1 for k in self.dcfb_kernels):
            raise ValueError("dcfb_kernels must be odd and positive")
        dims = self.pyramid_dims
        if not dims[0] > dims[1] > dims[2] > 0:
            raise ValueError(f"pyramid_dims must be strictly decreasing, got {dims}")
        if dims[0] != self.feature_dim:
            raise ValueError("pyramid_dims[0] must equal feature_dim")
        if any(d % self.token_dim for d in dims):
            raise ValueError(f"token_dim {self.token_dim} must divide every pyramid dim {dims}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ValueError(f"heads {self.heads} must divide token_dim {self.token_dim}")
        if self.kan_degree < 1 or self.kan_grid < self.kan_degree + 1 or self.kan_range <= 0:
            raise ValueError("KAN needs degree >= 1, grid >= degree + 1 and a positive range")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        return self


class TrainConfig(_Strict):
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    seed: int = 0
    fusion_mode: FusionMode = "msca"
    augment_rotate: bool = True
    augment_sharpen: bool = True
    augment_normalize: bool = True
    threshold: float = 0.5

    @field_validator("lr")
    @classmethod
    def _lr_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("batch_size", "epochs")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v


class DataConfig(_Strict):
    geometry: tuple[int, int, int] = (12, 192, 192)
    n_majority: int = Field(251, ge=1)
    n_minority: int = Field(61, ge=1)
    class_signal: float = 1.0
    tabular_signal: float = 0.5
    noise_std: float = Field(1.0, gt=0)
    seed: int = 0


class RunConfig(_Strict):
    """The flat, versioned run file accepted by `mmfuse train`."""

    schema_version: Literal[1] = 1
    seed: int = 0
    # training
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = 4
    fusion_mode: FusionMode = "msca"
    augment_rotate: bool = True
    augment_sharpen: bool = True
    augment_normalize: bool = True
    threshold: float = Field(0.5, gt=0, lt=1)
    # data
    geometry: tuple[int, int, int] = (12, 192, 192)
    n_majority: int = 251
    n_minority: int = 61
    class_signal: float = 1.0
    tabular_signal: float = 0.5
    noise_std: float = 1.0
    # architecture
    backbone_channels: tuple[int, int, int] = (64, 128, 256)
    bfpu_channels: int = 128
    feature_dim: int = 256
    cab_reduction: int = 16
    sab_kernel: int = 7
    dcfb_kernels: tuple[int, ...] = (1, 3, 5)
    pyramid_dims: tuple[int, int, int] = (256, 128, 64)
    token_dim: int = 16
    heads: int = 4
    kan_hidden: int = 64
    kan_degree: int = 3
    kan_grid: int = 8
    kan_range: float = 3.0
    dropout: float = 0.5
    use_e3d_msca: bool = True
    use_dropout: bool = True

    @model_validator(mode="after")
    def _check_views(self) -> "RunConfig":
        # surface nested invariants as field errors on this model
        self.to_model_config()
        self.to_train_config()
        self.to_data_config()
        return self

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            geometry=self.geometry,
            backbone_channels=self.backbone_channels,
            bfpu_channels=self.bfpu_channels,
            feature_dim=self.feature_dim,
            cab_reduction=self.cab_reduction,
            sab_kernel=self.sab_kernel,
            dcfb_kernels=self.dcfb_kernels,
            pyramid_dims=self.pyramid_dims,
            token_dim=self.token_dim,
            heads=self.heads,
            kan_hidden=self.kan_hidden,
            kan_degree=self.kan_degree,
            kan_grid=self.kan_grid,
            kan_range=self.kan_range,
            dropout=self.dropout,
            use_e3d_msca=self.use_e3d_msca,
            use_dropout=self.use_dropout,
            fusion_mode=self.fusion_mode,
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.seed,
            fusion_mode=self.fusion_mode,
            augment_rotate=self.augment_rotate,
            augment_sharpen=self.augment_sharpen,
            augment_normalize=self.augment_normalize,
            threshold=self.threshold,
        )

    def to_data_config(self) -> DataConfig:
        return DataConfig(
            geometry=self.geometry,
            n_majority=self.n_majority,
            n_minority=self.n_minority,
            class_signal=self.class_signal,
            tabular_signal=self.tabular_signal,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def canonical_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)

    def content_hash(self) -> str:
        """Git-style blob SHA-1 of the canonical config JSON."""
        body = self.canonical_json()
        return hashlib.sha1(b"blob %d\0" % len(body) + body, usedforsecurity=False).hexdigest()


class EncoderVariant(_Strict):
    name: str
    use_e3d_msca: bool = True
    use_dropout: bool = True


class AblationGrid(_Strict):
    schema_version: Literal[1] = 1
    base: RunConfig | str = Field(default_factory=RunConfig)
    modes: list[FusionMode] = Field(default_factory=lambda: list(FUSION_MODES))
    encoder_variants: list[EncoderVariant] = Field(default_factory=list)

    def resolve_base(self, relative_to: Path | None = None) -> RunConfig:
        if isinstance(self.base, RunConfig):
            return self.base
        path = Path(self.base)
        if relative_to is not None and not path.is_absolute():
            path = relative_to / path
        return RunConfig.model_validate(load_config(path))

    def cells(self, base: RunConfig) -> list[tuple[str, RunConfig]]:
        variants = self.encoder_variants or [
            EncoderVariant(name="base", use_e3d_msca=base.use_e3d_msca, use_dropout=base.use_dropout)
        ]
        out = []
        for mode in self.modes:
            for variant in variants:
                cell = base.model_copy(
                    update={
                        "fusion_mode": mode,
                        "use_e3d_msca": variant.use_e3d_msca,
                        "use_dropout": variant.use_dropout,
                    }
                )
                out.append((f"{mode}/{variant.name}", cell))
        return out
