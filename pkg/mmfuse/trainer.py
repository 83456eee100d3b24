"""
Training loop, evaluation and run artifacts

A run is fully determined by (RunConfig, seed): the synthetic cohort, the split, the
oversampled index multiset, the per-epoch shuffles, augmentations and dropout masks all come
from generators seeded from the config seed.
"""
from __future__ import annotations

import csv
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict

from . import data
from .batches import TabularBatch
from .config import RunConfig, TrainConfig
from .errors import ConfigurationError, DataError, NonFiniteError, NonFiniteLossError
from .functional import sigmoid
from .losses import bce_loss
from .metrics import MetricsReport, compute_metrics
from .mmf_io import load_checkpoint, save_checkpoint
from .model import FusionModel
from .nn import load_state_dict, parameters, state_dict
from .observability import MetricsCollector
from .optim import SGD
from .tabular import TabularSchema
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "val_auroc", "val_acc", "val_f1")


class EpochRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: float | None = None
    val_acc: float | None = None
    val_f1: float | None = None


class RunManifest(BaseModel):
    """Everything but `wall_clock_seconds` is reproducible bitwise from (config, seed)."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    config: dict[str, Any]
    seed: int
    config_hash: str
    dataset_hash: str
    split_sizes: dict[str, int]
    epochs: list[EpochRow]
    best_epoch: int
    final_metrics: dict[str, int | float]
    best_metrics: dict[str, int | float]
    wall_clock_seconds: float

    def deterministic_dump(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude={"wall_clock_seconds"})


@dataclass
class Inputs:
    ids: list[str]
    volumes: np.ndarray  # [N,1,D,H,W], normalized when configured
    tabular: np.ndarray  # encoded [N, width]
    labels: np.ndarray
    columns: tuple[str, ...]


@dataclass
class RunResult:
    manifest: RunManifest
    model: FusionModel
    schema: TabularSchema
    test_scores: np.ndarray
    out_dir: Path


def default_run_dir(cfg: RunConfig, runs_dir: str | Path) -> Path:
    return Path(runs_dir) / f"{cfg.content_hash()[:12]}-s{cfg.seed}"


def prepare_inputs(cohort: data.Cohort, schema: TabularSchema, normalize: bool) -> Inputs:
    volumes = np.stack([data.normalize(v) for v in cohort.volumes]) if normalize else cohort.volumes
    return Inputs(cohort.ids, volumes, schema.encode(cohort.records), cohort.labels, schema.columns)


def predict_scores(model: FusionModel, inputs: Inputs, batch_size: int) -> np.ndarray:
    """Eval-mode probabilities in sample order, batch by batch."""
    scores = []
    with no_grad():
        for idx in data.iterate_batches(np.arange(len(inputs.ids)), batch_size):
            tab = TabularBatch(inputs.tabular[idx], inputs.labels[idx], inputs.columns)
            scores.append(model.predict_proba(Tensor(inputs.volumes[idx]), tab).data)
    return np.concatenate(scores)


def score_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        return bce_loss(Tensor(scores), labels).item()


def evaluate(model: FusionModel, inputs: Inputs, batch_size: int, threshold: float) -> tuple[np.ndarray, MetricsReport]:
    scores = predict_scores(model, inputs, batch_size)
    return scores, compute_metrics(scores, inputs.labels, threshold)


def _augment_ops(cfg: TrainConfig) -> list[data.AugmentOp]:
    ops: list[data.AugmentOp] = []
    if cfg.augment_rotate:
        ops.append("rotation")
    if cfg.augment_sharpen:
        ops.append("sharpen")
    if cfg.augment_normalize:
        ops.append("normalize")
    return ops


def _train_step(
    model: FusionModel,
    opt: SGD,
    volumes: np.ndarray,
    tab: TabularBatch,
    rng: np.random.Generator,
    epoch: int,
    step: int,
) -> float:
    opt.zero_grad()
    try:
        probs = sigmoid(model.forward_logits(Tensor(volumes), tab, train_mode=True, rng=rng))
        loss = bce_loss(probs, tab.labels)
    except NonFiniteError as e:
        raise NonFiniteLossError(epoch, step, float("nan")) from e
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(epoch, step, value)
    loss.backward()
    opt.step()
    return value


def train(cfg: RunConfig, out_dir: str | Path, collector: MetricsCollector | None = None) -> RunResult:
    """
    Generate the cohort, fit the tabular schema on the training split, oversample the minority
    class, then run `epochs` epochs of augment -> forward -> BCE -> SGD with validation after
    every epoch. Writes the run directory and returns the result.
    """
    started = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collector = collector or MetricsCollector()

    run = cfg.to_train_config()
    dataset = data.generate(cfg.to_data_config())
    train_set, val_set, test_set = (dataset.split(name) for name in ("train", "val", "test"))
    schema = TabularSchema().fit(train_set.records)
    train_tab = schema.encode(train_set.records)
    val_in = prepare_inputs(val_set, schema, run.augment_normalize)
    test_in = prepare_inputs(test_set, schema, run.augment_normalize)
    train_idx = data.oversample(train_set.labels, seed=run.seed)

    model = FusionModel.create(cfg.to_model_config(), schema.columns, seed=run.seed)
    opt = SGD(parameters(model), run.lr, run.weight_decay)
    ops = _augment_ops(run)
    shuffle_rng = np.random.default_rng([run.seed, 3])
    augment_rng = np.random.default_rng([run.seed, 4])
    dropout_rng = np.random.default_rng([run.seed, 5])
    logger.info(
        f"Training {run.fusion_mode} for {run.epochs} epochs on {train_idx.size} oversampled samples "
        f"({len(opt.params)} parameter tensors)"
    )

    rows: list[EpochRow] = []
    best_state, best_epoch, best_auroc = None, 0, -np.inf
    for epoch in range(1, run.epochs + 1):
        total, seen = 0.0, 0
        for step, idx in enumerate(data.iterate_batches(train_idx, run.batch_size, shuffle_rng)):
            t0 = time.perf_counter()
            volumes = data.augment_batch(train_set.volumes[idx], ops, augment_rng)
            tab = TabularBatch(train_tab[idx], train_set.labels[idx], schema.columns)
            try:
                value = _train_step(model, opt, volumes, tab, dropout_rng, epoch, step)
            except NonFiniteLossError as e:
                collector.record_nonfinite()
                logger.error(f"Aborting: {e}")
                raise
            collector.record_step(time.perf_counter() - t0)
            total += value * idx.size
            seen += idx.size

        scores, report = evaluate(model, val_in, run.batch_size, run.threshold)
        row = EpochRow(
            epoch=epoch,
            train_loss=total / seen,
            val_loss=score_loss(scores, val_in.labels),
            val_auroc=report.auroc,
            val_acc=report.acc,
            val_f1=report.f1,
        )
        rows.append(row)
        collector.record_epoch("train", row.train_loss, None)
        collector.record_epoch("val", row.val_loss, report.auroc)
        if report.undefined:
            logger.warning(f"Epoch {epoch}: undefined validation metrics {report.undefined}")
        logger.info(
            f"Epoch {epoch}/{run.epochs} train_loss={row.train_loss:.4f} val_loss={row.val_loss:.4f} "
            f"val_auroc={report.auroc if report.auroc is None else round(report.auroc, 4)}"
        )
        auroc = -np.inf if report.auroc is None else report.auroc
        if best_state is None or auroc > best_auroc:
            best_state, best_epoch, best_auroc = state_dict(model), epoch, auroc

    last_state = state_dict(model)
    test_scores, final = evaluate(model, test_in, run.batch_size, run.threshold)
    load_state_dict(model, best_state)
    _, best = evaluate(model, test_in, run.batch_size, run.threshold)
    load_state_dict(model, last_state)

    meta = {"config": cfg.model_dump(mode="json"), "schema": schema.model_dump(mode="json")}
    save_checkpoint(out_dir / "checkpoint" / "last", last_state, meta)
    save_checkpoint(out_dir / "checkpoint" / "best", best_state, meta)
    data.export_dataset(out_dir / "dataset", test_set, dataset.dataset_hash)

    manifest = RunManifest(
        config=cfg.model_dump(mode="json"),
        seed=run.seed,
        config_hash=cfg.content_hash(),
        dataset_hash=dataset.dataset_hash,
        split_sizes={
            "train": len(train_set),
            "train_oversampled": int(train_idx.size),
            "val": len(val_set),
            "test": len(test_set),
        },
        epochs=rows,
        best_epoch=best_epoch,
        final_metrics=final.to_dict(),
        best_metrics=best.to_dict(),
        wall_clock_seconds=time.perf_counter() - started,
    )
    write_json(out_dir / "manifest.json", manifest.model_dump(mode="json"))
    write_json(out_dir / "metrics.json", final.to_dict())
    write_epochs_csv(out_dir / "epochs.csv", rows)
    write_predictions_csv(out_dir / "predictions.csv", test_in.ids, test_scores, test_in.labels)
    collector.write_metrics(out_dir / "metrics.prom")
    logger.info(f"Run finished: test auroc={final.auroc} (best epoch {best_epoch}), artifacts in {out_dir}")
    return RunResult(manifest, model, schema, test_scores, out_dir)


# *** checkpoint evaluation ***
def load_model(ckpt: str | Path) -> tuple[FusionModel, RunConfig, TabularSchema]:
    """Rebuild the model of a checkpoint directory (or its parent run directory's last checkpoint)."""
    ckpt = Path(ckpt)
    if not (ckpt / "index.json").is_file() and (ckpt / "checkpoint" / "last" / "index.json").is_file():
        ckpt = ckpt / "checkpoint" / "last"
    state, meta = load_checkpoint(ckpt, ("config", "schema"))
    cfg = RunConfig.model_validate(meta["config"])
    schema = TabularSchema.model_validate(meta["schema"])
    model = FusionModel.create(cfg.to_model_config(), schema.columns, seed=cfg.seed, init_mode="zeros")
    load_state_dict(model, state)
    return model, cfg, schema


def evaluate_checkpoint(
    ckpt: str | Path, dataset_path: str | Path, out_dir: str | Path, dump_gates: bool = False
) -> MetricsReport:
    model, cfg, schema = load_model(ckpt)
    cohort, manifest = data.load_dataset(dataset_path, schema)
    if tuple(manifest.geometry) != tuple(cfg.geometry):
        raise ConfigurationError(f"dataset geometry {manifest.geometry} != checkpoint geometry {cfg.geometry}")
    run = cfg.to_train_config()
    inputs = prepare_inputs(cohort, schema, run.augment_normalize)
    scores, report = evaluate(model, inputs, run.batch_size, run.threshold)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "metrics.json", report.to_dict())
    write_predictions_csv(out_dir / "predictions.csv", inputs.ids, scores, inputs.labels)
    if dump_gates:
        write_gate_csvs(model, inputs, run.batch_size, out_dir)
    logger.info(f"Evaluated {len(cohort)} samples from {dataset_path}: auroc={report.auroc}")
    return report


def write_gate_csvs(model: FusionModel, inputs: Inputs, batch_size: int, out_dir: Path) -> None:
    """
    gates.csv: per sample, pyramid level and depth slice the mean/max SAB spatial gate.
    slices.csv: per input slice the mean intensity and the level-1 mean gate mapped to input depth.
    """
    if not model.image.attention:
        raise ConfigurationError("gate dump needs a model with E3D-MSCA enabled")
    depth = inputs.volumes.shape[2]
    gate_rows, slice_rows = [], []
    with no_grad():
        for idx in data.iterate_batches(np.arange(len(inputs.ids)), batch_size):
            trace: dict[str, Any] = {}
            tab = TabularBatch(inputs.tabular[idx], inputs.labels[idx], inputs.columns)
            model.forward_logits(Tensor(inputs.volumes[idx]), tab, trace=trace)
            for b, i in enumerate(idx):
                sample_id = inputs.ids[i]
                for level in sorted(trace):
                    gate = trace[level]["sab"][b]
                    for z in range(gate.shape[0]):
                        gate_rows.append([sample_id, level, z, float(gate[z].mean()), float(gate[z].max())])
                level1 = trace["level1"]["sab"][b]
                source = np.floor(np.arange(depth) * level1.shape[0] / depth).astype(int)
                for z in range(depth):
                    slice_rows.append(
                        [sample_id, z, float(inputs.volumes[i, 0, z].mean()), float(level1[source[z]].mean())]
                    )
    _write_csv(out_dir / "gates.csv", ["id", "level", "depth_index", "mean_gate", "max_gate"], gate_rows)
    _write_csv(out_dir / "slices.csv", ["id", "depth_index", "mean_intensity", "mean_level1_gate"], slice_rows)


# *** artifact writers ***
def write_json(path: Path, payload: Any) -> None:
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_epochs_csv(path: Path, rows: Sequence[EpochRow]) -> None:
    _write_csv(path, EPOCH_COLUMNS, [[r.epoch, *(_fmt(getattr(r, c)) for c in EPOCH_COLUMNS[1:])] for r in rows])


def write_predictions_csv(path: Path, ids: Sequence[str], scores: np.ndarray, labels: np.ndarray) -> None:
    _write_csv(path, ["id", "score", "label"], [[i, repr(float(s)), int(y)] for i, s, y in zip(ids, scores, labels, strict=True)])


def read_predictions_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows and set(rows[0]) != {"id", "score", "label"}:
        raise DataError(f"{path}: expected columns id,score,label")
    return (
        [r["id"] for r in rows],
        np.array([float(r["score"]) for r in rows]),
        np.array([int(r["label"]) for r in rows]),
    )
