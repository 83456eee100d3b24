"""
Binary classification metrics - confusion counts, six threshold ratios and AUROC
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata

from .errors import DataError

RATIO_NAMES = ("auroc", "acc", "f1", "specificity", "sensitivity", "ppv", "npv")

Ratio = float | None


class MetricsReport(BaseModel):
    """Counts at the decision threshold plus every metric; a ratio with a zero denominator is None."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)
    auroc: Ratio = Field(default=None, ge=0, le=1)
    acc: Ratio = Field(default=None, ge=0, le=1)
    f1: Ratio = Field(default=None, ge=0, le=1)
    specificity: Ratio = Field(default=None, ge=0, le=1)
    sensitivity: Ratio = Field(default=None, ge=0, le=1)
    ppv: Ratio = Field(default=None, ge=0, le=1)
    npv: Ratio = Field(default=None, ge=0, le=1)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def undefined(self) -> list[str]:
        return [name for name in RATIO_NAMES if getattr(self, name) is None]

    def to_dict(self) -> dict[str, int | float]:
        """JSON form: undefined ratios are left out, never written as 0."""
        return self.model_dump(exclude_none=True)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, auroc: float | None = None) -> MetricsReport:
        def ratio(num: int, den: int) -> float | None:
            return num / den if den else None

        return cls(
            tp=tp,
            fp=fp,
            tn=tn,
            fn=fn,
            auroc=auroc,
            acc=ratio(tp + tn, tp + fp + tn + fn),
            f1=ratio(2 * tp, 2 * tp + fp + fn),
            specificity=ratio(tn, tn + fp),
            sensitivity=ratio(tp, tp + fn),
            ppv=ratio(tp, tp + fp),
            npv=ratio(tn, tn + fn),
        )


def auroc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """P(score of a positive > score of a negative), ties counted 1/2; None for a single class."""
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise DataError("metrics need at least one sample")
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    labels = labels.astype(np.int64)
    predicted = scores >= threshold
    actual = labels == 1
    return MetricsReport.from_counts(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
        auroc=auroc(scores, labels),
    )
