"""
MMF1 raw tensor files and checkpoint directories

Layout (little-endian): b"MMF1", u32 rank, rank x u64 extents, float64 payload in row-major order.
"""
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
import orjson

from .errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"MMF1"
_RANK = struct.Struct("<I")
_EXTENT = struct.Struct("<Q")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    header = MAGIC + _RANK.pack(arr.ndim) + b"".join(_EXTENT.pack(n) for n in arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise DataError(f"{source}: truncated header")
    (rank,) = _RANK.unpack_from(blob, 4)
    offset = 8 + rank * _EXTENT.size
    if len(blob) < offset:
        raise DataError(f"{source}: truncated header for rank {rank}")
    shape = tuple(_EXTENT.unpack_from(blob, 8 + i * _EXTENT.size)[0] for i in range(rank))
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(blob) - offset != expected:
        raise DataError(f"{source}: payload has {len(blob) - offset} bytes, shape {shape} needs {expected}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"tensor file not found: {path}")
    return decode_tensor(path.read_bytes(), str(path))


def _file_name(param_name: str) -> str:
    return param_name.replace("/", "_") + ".mmf"


def save_checkpoint(directory: str | Path, state: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """
    Write one MMF1 file per parameter plus `index.json` (name -> file) and one JSON file per
    `meta` entry (e.g. config.json, schema.json).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, array in state.items():
        fname = _file_name(name)
        write_tensor(directory / fname, array)
        index[name] = fname
    (directory / "index.json").write_bytes(orjson.dumps(index, option=orjson.OPT_INDENT_2))
    for key, value in meta.items():
        (directory / f"{key}.json").write_bytes(orjson.dumps(value, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    logger.info(f"Checkpoint with {len(state)} tensors written to {directory}")
    return directory


def load_checkpoint(directory: str | Path, meta_keys: tuple[str, ...] = ()) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise DataError(f"{directory} is not a checkpoint (no index.json)")
    index = orjson.loads(index_path.read_bytes())
    state = {name: read_tensor(directory / fname) for name, fname in index.items()}
    meta = {}
    for key in meta_keys:
        path = directory / f"{key}.json"
        if not path.is_file():
            raise DataError(f"checkpoint {directory} lacks {key}.json")
        meta[key] = orjson.loads(path.read_bytes())
    return state, meta
