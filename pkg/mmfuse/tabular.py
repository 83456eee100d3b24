"""
Tabular schema - clinical attributes, one-hot/standardized encoding and CSV I/O
"""
from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ConfigurationError, DataError

Record = Mapping[str, str | float]


class AttributeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    kind: Literal["categorical", "numeric"]
    categories: tuple[str, ...] = ()


DEFAULT_ATTRIBUTES: tuple[AttributeSpec, ...] = (
    AttributeSpec(name="gender", kind="categorical", categories=("F", "M")),
    AttributeSpec(name="age", kind="numeric"),
    AttributeSpec(name="weight", kind="numeric"),
    AttributeSpec(name="t_stage", kind="categorical", categories=("T1", "T2", "T3", "T4")),
    AttributeSpec(name="n_stage", kind="categorical", categories=("N0", "N1", "N2", "N3")),
    AttributeSpec(name="m_stage", kind="categorical", categories=("M0", "M1")),
    AttributeSpec(name="smoking", kind="categorical", categories=("never", "former", "current")),
)


class TabularSchema(BaseModel):
    """
    Ordered attribute list and, once fitted, the (mean, std) of every numeric attribute
    computed on the training split.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    attributes: tuple[AttributeSpec, ...] = DEFAULT_ATTRIBUTES
    stats: dict[str, tuple[float, float]] | None = None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def columns(self) -> tuple[str, ...]:
        cols: list[str] = []
        for a in self.attributes:
            if a.kind == "numeric":
                cols.append(a.name)
            else:
                cols.extend(f"{a.name}={c}" for c in a.categories)
        return tuple(cols)

    @property
    def width(self) -> int:
        return len(self.columns)

    def _value(self, record: Record, attr: AttributeSpec) -> str | float:
        if attr.name not in record:
            raise DataError(f"tabular record lacks attribute '{attr.name}'")
        raw = record[attr.name]
        if attr.kind == "numeric":
            try:
                value = float(raw)
            except (TypeError, ValueError) as e:
                raise DataError(f"attribute '{attr.name}': {raw!r} is not numeric") from e
            if not np.isfinite(value):
                raise DataError(f"attribute '{attr.name}': value {raw!r} is not finite")
            return value
        if str(raw) not in attr.categories:
            raise DataError(f"attribute '{attr.name}': unknown category {raw!r}, expected one of {attr.categories}")
        return str(raw)

    def fit(self, records: Sequence[Record]) -> TabularSchema:
        """Return a copy with numeric statistics taken from `records` (the training split)."""
        if not records:
            raise DataError("cannot fit tabular statistics on an empty split")
        stats = {}
        for attr in self.attributes:
            if attr.kind != "numeric":
                continue
            values = np.array([self._value(r, attr) for r in records], dtype=np.float64)
            std = float(values.std())
            stats[attr.name] = (float(values.mean()), std if std > 0 else 1.0)
        return self.model_copy(update={"stats": stats})

    def encode(self, records: Sequence[Record]) -> np.ndarray:
        if self.stats is None:
            raise ConfigurationError("tabular schema must be fitted on the training split before encoding")
        out = np.zeros((len(records), self.width))
        for i, record in enumerate(records):
            col = 0
            for attr in self.attributes:
                value = self._value(record, attr)
                if attr.kind == "numeric":
                    mean, std = self.stats[attr.name]
                    out[i, col] = (float(value) - mean) / std
                    col += 1
                else:
                    out[i, col + attr.categories.index(str(value))] = 1.0
                    col += len(attr.categories)
        return out


def write_tabular_csv(path: str | Path, ids: Sequence[str], records: Sequence[Record], schema: TabularSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", *schema.names])
        for sample_id, record in zip(ids, records, strict=True):
            writer.writerow([sample_id, *(repr(float(v)) if isinstance(v, float) else v for v in (record[n] for n in schema.names))])


def read_tabular_csv(path: str | Path, schema: TabularSchema) -> tuple[list[str], list[dict[str, str]]]:
    """Read `id` + attribute columns; the header must name every schema attribute."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for name in ("id", *schema.names):
            if name not in header:
                raise DataError(f"{path}: header lacks attribute '{name}'")
        rows = list(reader)
    ids = [row["id"] for row in rows]
    records = [{n: row[n] for n in schema.names} for row in rows]
    return ids, records
