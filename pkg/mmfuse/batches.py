from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError


@dataclass
class VolumeBatch:
    """Single-channel volumes [B,1,D,H,W] with labels [B]."""

    volumes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.volumes.ndim != 5 or self.volumes.shape[1] != 1:
            raise DimensionError(f"volume batch must be [B,1,D,H,W], got {self.volumes.shape}")
        if self.labels.shape != (self.volumes.shape[0],):
            raise DimensionError(f"labels {self.labels.shape} do not match batch size {self.volumes.shape[0]}")

    @property
    def geometry(self) -> tuple[int, int, int]:
        d, h, w = self.volumes.shape[2:]
        return (d, h, w)


@dataclass
class TabularBatch:
    """Encoded clinical features [B, width] with labels [B]; `columns` names each encoded column."""

    features: np.ndarray
    labels: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != len(self.columns):
            raise DataError(f"tabular features {self.features.shape} do not match {len(self.columns)} encoded columns")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(f"labels {self.labels.shape} do not match batch size {self.features.shape[0]}")
