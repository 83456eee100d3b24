"""
Binary cross-entropy on predicted probabilities
"""
import numpy as np

from .errors import DataError, DimensionError
from .functional import clamp
from .tensor import Tensor

EPS = 1e-7


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    bad = ~np.isin(y, (0.0, 1.0))
    if bad.any():
        raise DataError(f"labels must be 0 or 1, got {y[bad][:5].tolist()}")
    return y


def bce_loss(y_hat: Tensor, y: np.ndarray) -> Tensor:
    """-mean(y log p + (1 - y) log(1 - p)) with p clamped to [1e-7, 1 - 1e-7]."""
    y = _check_labels(y)
    if y_hat.shape != y.shape or y_hat.ndim != 1:
        raise DimensionError(f"bce_loss expects probabilities [N] and labels [N], got {y_hat.shape} and {y.shape}")
    p = clamp(y_hat, EPS, 1.0 - EPS)
    labels = Tensor(y, copy=False)
    return -(labels * p.log() + (1.0 - labels) * (1.0 - p).log()).mean()
