"""
Data pipeline - synthetic cohort, stratified splits, oversampling, augmentation, batching and
on-disk dataset export/import
"""
from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from .batches import TabularBatch, VolumeBatch
from .config import DataConfig
from .errors import ConfigurationError, DataError
from .mmf_io import read_tensor, write_tensor
from .tabular import DEFAULT_ATTRIBUTES, TabularSchema, read_tabular_csv, write_tabular_csv

logger = logging.getLogger(__name__)

MINORITY = 1
MIN_EXTENT = 4
LESION_RADIUS = (2.0, 4.0)
MAX_ROTATION_DEG = 15.0
SHARPEN_KERNEL = np.array([[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]])
NORMALIZE_STD_FLOOR = 1e-6

# held-out fractions of the reference cohort: 12 + 15 of 61 minority, 24 + 29 of 251 majority
SPLIT_FRACTIONS = {MINORITY: (12 / 61, 15 / 61), 1 - MINORITY: (24 / 251, 29 / 251)}

AugmentOp = Literal["rotation", "sharpen", "normalize"]


@dataclass
class Cohort:
    """Raw samples: ids, volumes [N,1,D,H,W], clinical records and labels (1 = minority class)."""

    ids: list[str]
    volumes: np.ndarray
    records: list[dict[str, str | float]]
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if self.volumes.shape[0] != n or len(self.records) != n or self.labels.shape != (n,):
            raise DataError(
                f"cohort parts disagree: {n} ids, {self.volumes.shape[0]} volumes, "
                f"{len(self.records)} records, {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def geometry(self) -> tuple[int, int, int]:
        d, h, w = self.volumes.shape[2:]
        return (d, h, w)

    def subset(self, indices: Sequence[int] | np.ndarray) -> Cohort:
        idx = np.asarray(indices, dtype=np.int64)
        return Cohort(
            ids=[self.ids[i] for i in idx],
            volumes=self.volumes[idx],
            records=[self.records[i] for i in idx],
            labels=self.labels[idx],
        )

    def volume_batch(self) -> VolumeBatch:
        return VolumeBatch(self.volumes, self.labels)

    def tabular_batch(self, schema: TabularSchema) -> TabularBatch:
        return TabularBatch(schema.encode(self.records), self.labels, schema.columns)


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class SyntheticData:
    cohort: Cohort
    splits: Splits
    dataset_hash: str

    def split(self, name: Literal["train", "val", "test"]) -> Cohort:
        return self.cohort.subset(getattr(self.splits, name))


# *** synthetic cohort ***
def _lesion_mask(rng: np.random.Generator, geometry: tuple[int, int, int]) -> np.ndarray:
    radii = np.minimum(rng.uniform(*LESION_RADIUS, size=3), np.asarray(geometry) / 2.0)
    center = [
        rng.uniform(r, n - 1 - r) if n - 1 - r > r else (n - 1) / 2.0
        for r, n in zip(radii, geometry, strict=True)
    ]
    grid = np.ogrid[tuple(slice(0, n) for n in geometry)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii, strict=True))
    return dist <= 1.0


def _categorical(rng: np.random.Generator, categories: tuple[str, ...], shift: float) -> str:
    logits = shift * np.linspace(-1.0, 1.0, len(categories))
    probs = np.exp(logits - logits.max())
    return categories[int(rng.choice(len(categories), p=probs / probs.sum()))]


def _synth_record(rng: np.random.Generator, label: int, tabular_signal: float) -> dict[str, str | float]:
    shift = 0.5 * tabular_signal * (1.0 if label == MINORITY else -1.0)
    record: dict[str, str | float] = {}
    for attr in DEFAULT_ATTRIBUTES:
        if attr.name == "age":
            record["age"] = float(np.round(rng.normal(62.0 + 9.0 * shift, 9.0), 1))
        elif attr.name == "weight":
            record["weight"] = float(np.round(rng.normal(68.0 - 11.0 * shift, 11.0), 1))
        else:
            record[attr.name] = _categorical(rng, attr.categories, shift)
    return record


def synth_generate(
    n_majority: int,
    n_minority: int,
    geometry: tuple[int, int, int],
    class_signal: float = 1.0,
    seed: int = 0,
    tabular_signal: float = 0.5,
    noise_std: float = 1.0,
) -> SyntheticData:
    """
    Noise volumes with one small bright ellipsoid (radius 2-4 voxels) each; the lesion of the
    minority class is brighter by `class_signal` noise standard deviations. Clinical records are
    drawn from class-conditional distributions shifted by `tabular_signal`.
    """
    if n_majority < 1 or n_minority < 1:
        raise ConfigurationError(f"class counts must be >= 1, got {n_majority}/{n_minority}")
    if any(n < MIN_EXTENT for n in geometry):
        raise ConfigurationError(f"geometry {tuple(geometry)} too small for a lesion, every extent must be >= {MIN_EXTENT}")
    rng = np.random.default_rng(seed)
    n = n_majority + n_minority
    labels = rng.permutation(np.r_[np.zeros(n_majority, np.int64), np.ones(n_minority, np.int64)])
    volumes = np.empty((n, 1, *geometry))
    records = []
    for i, label in enumerate(labels):
        vol = rng.normal(0.0, noise_std, size=geometry)
        intensity = (1.0 + (class_signal if label == MINORITY else 0.0)) * noise_std
        vol[_lesion_mask(rng, geometry)] += intensity
        volumes[i, 0] = vol
        records.append(_synth_record(rng, int(label), tabular_signal))
    cohort = Cohort([f"case-{i:04d}" for i in range(n)], volumes, records, labels)
    splits = stratified_split(labels, seed)
    logger.info(
        f"Synthetic cohort {n} samples ({n_minority} minority), "
        f"split train/val/test {splits.train.size}/{splits.val.size}/{splits.test.size}"
    )
    return SyntheticData(cohort, splits, dataset_hash(cohort))


def generate(cfg: DataConfig) -> SyntheticData:
    return synth_generate(
        cfg.n_majority, cfg.n_minority, cfg.geometry, cfg.class_signal, cfg.seed, cfg.tabular_signal, cfg.noise_std
    )


# *** splits and oversampling ***
def split_sizes(n: int, val_fraction: float, test_fraction: float) -> tuple[int, int, int]:
    """(train, val, test) counts for one class; val and test get at least one sample each."""
    if n < 3:
        raise ConfigurationError(f"a class needs at least 3 samples to fill train/val/test, got {n}")
    val = max(1, int(np.floor(n * val_fraction + 0.5)))
    test = max(1, int(np.floor(n * test_fraction + 0.5)))
    while val + test > n - 1:
        if test >= val and test > 1:
            test -= 1
        else:
            val -= 1
    return n - val - test, val, test


def stratified_split(labels: np.ndarray, seed: int = 0) -> Splits:
    rng = np.random.default_rng([seed, 1])
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for cls in (1 - MINORITY, MINORITY):
        members = rng.permutation(np.flatnonzero(labels == cls))
        _, n_val, n_test = split_sizes(members.size, *SPLIT_FRACTIONS[cls])
        parts["val"].append(members[:n_val])
        parts["test"].append(members[n_val : n_val + n_test])
        parts["train"].append(members[n_val + n_test :])
    return Splits(**{name: np.sort(np.concatenate(p)) for name, p in parts.items()})


def oversample(
    labels: np.ndarray, minority_class: int = MINORITY, target: int | None = None, seed: int = 0
) -> np.ndarray:
    """
    Indices of the training set with minority samples drawn uniformly with replacement until the
    minority count reaches `target` (the majority count by default). Every original index is kept.
    """
    labels = np.asarray(labels)
    minority = np.flatnonzero(labels == minority_class)
    if minority.size == 0:
        raise DataError(f"cannot oversample: no samples of class {minority_class}")
    if target is None:
        target = int(np.sum(labels != minority_class))
    base = np.arange(labels.size)
    if minority.size >= target:
        return base
    extra = np.random.default_rng([seed, 2]).choice(minority, size=target - minority.size, replace=True)
    return np.concatenate([base, extra])


def iterate_batches(
    indices: np.ndarray, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[np.ndarray]:
    order = rng.permutation(indices) if rng is not None else np.asarray(indices)
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


# *** augmentation ***
def rotate(volume: np.ndarray, angle: float) -> np.ndarray:
    """In-plane (H, W) rotation of every slice, bilinear, zero fill."""
    if angle == 0.0:
        return np.array(volume, dtype=np.float64)
    return ndimage.rotate(volume, angle, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)


def sharpen(volume: np.ndarray) -> np.ndarray:
    """Per-slice 3x3 sharpening, zero padding."""
    kernel = SHARPEN_KERNEL.reshape((1,) * (volume.ndim - 2) + (3, 3))
    return ndimage.correlate(np.asarray(volume, dtype=np.float64), kernel, mode="constant", cval=0.0)


def normalize(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    return (v - v.mean()) / max(float(v.std()), NORMALIZE_STD_FLOOR)


def augment(
    volume: np.ndarray, ops: Sequence[AugmentOp], rng: np.random.Generator | int = 0
) -> np.ndarray:
    """Apply `ops` in the order rotation, sharpen, normalize; the rotation angle is uniform in +-15 deg."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    unknown = set(ops) - {"rotation", "sharpen", "normalize"}
    if unknown:
        raise ConfigurationError(f"unknown augmentation ops {sorted(unknown)}")
    out = np.asarray(volume, dtype=np.float64)
    if "rotation" in ops:
        out = rotate(out, float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)))
    if "sharpen" in ops:
        out = sharpen(out)
    if "normalize" in ops:
        out = normalize(out)
    return out


def augment_batch(volumes: np.ndarray, ops: Sequence[AugmentOp], rng: np.random.Generator) -> np.ndarray:
    if not ops:
        return volumes
    return np.stack([augment(v, ops, rng) for v in volumes])


# *** hashing and export ***
def dataset_hash(cohort: Cohort) -> str:
    h = hashlib.sha256()
    h.update(orjson.dumps({"ids": cohort.ids, "records": cohort.records}, option=orjson.OPT_SORT_KEYS))
    h.update(np.ascontiguousarray(cohort.labels, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(cohort.volumes, dtype="<f8").tobytes())
    return h.hexdigest()


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    split: str = "test"
    geometry: tuple[int, int, int]
    ids: list[str]
    labels: list[int]
    volumes: list[str]
    tabular: str = "tabular.csv"
    dataset_hash: str


def export_dataset(directory: str | Path, cohort: Cohort, dataset_hash_: str, split: str = "test") -> Path:
    """Write `volumes/<id>.mmf`, `tabular.csv` and `manifest.json`; returns the manifest path."""
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    files = []
    for sample_id, vol in zip(cohort.ids, cohort.volumes, strict=True):
        rel = f"volumes/{sample_id}.mmf"
        write_tensor(directory / rel, vol[0])
        files.append(rel)
    write_tabular_csv(directory / "tabular.csv", cohort.ids, cohort.records, TabularSchema())
    manifest = DatasetManifest(
        split=split,
        geometry=cohort.geometry,
        ids=cohort.ids,
        labels=[int(v) for v in cohort.labels],
        volumes=files,
        dataset_hash=dataset_hash_,
    )
    path = directory / "manifest.json"
    path.write_bytes(orjson.dumps(manifest.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    logger.info(f"Exported {len(cohort)} {split} samples to {directory}")
    return path


def load_dataset(path: str | Path, schema: TabularSchema | None = None) -> tuple[Cohort, DatasetManifest]:
    """Read an exported split; `path` is the dataset directory or its manifest.json."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise DataError(f"dataset manifest not found: {manifest_path}")
    try:
        manifest = DatasetManifest.model_validate(orjson.loads(manifest_path.read_bytes()))
    except (orjson.JSONDecodeError, ValueError) as e:
        raise DataError(f"{manifest_path}: invalid dataset manifest: {e}") from e
    root = manifest_path.parent
    volumes = []
    for rel in manifest.volumes:
        vol = read_tensor(root / rel)
        if vol.shape != tuple(manifest.geometry):
            raise DataError(f"{rel}: volume shape {vol.shape} != manifest geometry {manifest.geometry}")
        volumes.append(vol[None])
    ids, records = read_tabular_csv(root / manifest.tabular, schema or TabularSchema())
    if ids != manifest.ids:
        raise DataError(f"{manifest.tabular}: ids do not match the manifest order")
    cohort = Cohort(ids, np.stack(volumes), records, np.asarray(manifest.labels, dtype=np.int64))
    return cohort, manifest
