"""
Command-line entry points: train, eval and ablate
"""
import argparse
import csv
import logging
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .config import LOG_LEVEL, RUNS_DIR, AblationGrid, RunConfig, load_config
from .errors import MmfuseError
from .logging_config import set_run_id, setup_logging
from .observability import trace_operation
from .trainer import default_run_dir, evaluate_checkpoint, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = (
    "cell", "fusion_mode", "use_e3d_msca", "use_dropout", "dataset_hash",
    "auroc", "acc", "f1", "specificity", "sensitivity", "ppv", "npv",
)


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        loc = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{loc}: {item['msg']}")
    return "\n".join(lines)


def load_run_config(path: str | Path) -> RunConfig:
    return RunConfig.model_validate(load_config(path))


@trace_operation("mmfuse.train")
def cmd_train(config: str, seed: int | None = None, out: str | None = None) -> int:
    cfg = load_run_config(config)
    if seed is not None:
        cfg = RunConfig.model_validate({**cfg.model_dump(), "seed": seed})
    set_run_id(f"{cfg.content_hash()[:12]}-s{cfg.seed}")
    out_dir = Path(out) if out else default_run_dir(cfg, RUNS_DIR)
    train(cfg, out_dir)
    return 0


@trace_operation("mmfuse.eval")
def cmd_eval(ckpt: str, data_path: str, out: str | None = None, dump_gates: bool = False) -> int:
    out_dir = Path(out) if out else Path(RUNS_DIR) / "eval"
    evaluate_checkpoint(ckpt, data_path, out_dir, dump_gates=dump_gates)
    return 0


def _run_cell(name: str, cfg: RunConfig, out_dir: Path) -> tuple[str, RunConfig, dict]:
    result = train(cfg, out_dir)
    return name, cfg, result.manifest.model_dump(mode="json")


@trace_operation("mmfuse.ablate")
def cmd_ablate(grid_path: str, out: str | None = None, jobs: int = 1) -> int:
    grid = AblationGrid.model_validate(load_config(grid_path))
    base = grid.resolve_base(Path(grid_path).parent)
    cells = grid.cells(base)
    out_dir = Path(out) if out else Path(RUNS_DIR) / f"ablation-{base.content_hash()[:12]}-s{base.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Ablation grid with {len(cells)} cells -> {out_dir}")

    targets = [(name, cfg, out_dir / name.replace("/", "__")) for name, cfg in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, *zip(*targets, strict=True)))
    else:
        results = [_run_cell(*t) for t in targets]

    hashes = {manifest["dataset_hash"] for _, _, manifest in results}
    if len(hashes) != 1:
        logger.warning(f"Ablation cells saw {len(hashes)} different datasets")
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for name, cfg, manifest in results:
            metrics = manifest["final_metrics"]
            writer.writerow([
                name, cfg.fusion_mode, cfg.use_e3d_msca, cfg.use_dropout, manifest["dataset_hash"],
                *(metrics.get(col, "") for col in ABLATION_COLUMNS[5:]),
            ])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfuse", description="Multimodal image + tabular fusion classifier")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration")
    p_train.add_argument("--config", required=True, help="run config (JSON or YAML)")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="run directory (default: $MMFUSE_RUNS_DIR/<hash>-s<seed>)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on an exported dataset")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint directory or run directory")
    p_eval.add_argument("--data", required=True, help="dataset directory or its manifest.json")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--dump-gates", action="store_true", help="also write gates.csv and slices.csv")

    p_ablate = sub.add_parser("ablate", help="train every cell of an ablation grid")
    p_ablate.add_argument("--grid", required=True)
    p_ablate.add_argument("--out", default=None)
    p_ablate.add_argument("--jobs", type=int, default=1, help="cells trained in parallel processes")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(LOG_LEVEL)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.seed, args.out)
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.data, args.out, args.dump_gates)
        return cmd_ablate(args.grid, args.out, max(1, args.jobs))
    except ValidationError as e:
        message = format_validation_error(e)
        logger.error(f"Invalid configuration:\n{message}")
        print(message, file=sys.stderr)
        return 2
    except MmfuseError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


def cli():
    """CLI entry point for the mmfuse command"""
    sys.exit(main())


if __name__ == "__main__":
    cli()
