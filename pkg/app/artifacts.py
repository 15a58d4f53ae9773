"""On-disk artifact formats.

GBEV tensors: b"GBEV", little-endian u32 version (1), u32 ndim, ndim x u64 dims,
then row-major little-endian float32 payload.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd

from app.errors import ArtifactIOError
from app.tensor import FeatureMap

logger = logging.getLogger(__name__)

GBEV_MAGIC = b"GBEV"
GBEV_VERSION = 1
_HEADER = struct.Struct("<4sII")


def ensure_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create output directory ({exc.strerror})", str(out)) from exc
    return out


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = _HEADER.pack(GBEV_MAGIC, GBEV_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode_tensor(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise ArtifactIOError("truncated GBEV header", source)
    magic, version, ndim = _HEADER.unpack_from(payload, 0)
    if magic != GBEV_MAGIC:
        raise ArtifactIOError(f"bad GBEV magic {magic!r}", source)
    if version != GBEV_VERSION:
        raise ArtifactIOError(f"unsupported GBEV version {version}", source)
    offset = _HEADER.size + 8 * ndim
    if len(payload) < offset:
        raise ArtifactIOError("truncated GBEV dims", source)
    dims = struct.unpack_from(f"<{ndim}Q", payload, _HEADER.size)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(payload) != offset + 4 * count:
        raise ArtifactIOError(f"GBEV payload size mismatch for dims {dims}", source)
    return np.frombuffer(payload, dtype="<f4", offset=offset, count=count).reshape(dims).astype(np.float32)


def write_tensor(path: str | Path, arr: np.ndarray | FeatureMap) -> Path:
    data = arr.data if isinstance(arr, FeatureMap) else arr
    target = Path(path)
    ensure_dir(target.parent)
    try:
        target.write_bytes(encode_tensor(data))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write tensor ({exc.strerror})", str(target)) from exc
    return target


def read_tensor(path: str | Path) -> np.ndarray:
    source = Path(path)
    if not source.is_file():
        raise ArtifactIOError("missing tensor artifact", str(source))
    try:
        payload = source.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read tensor ({exc.strerror})", str(source)) from exc
    return decode_tensor(payload, str(source))


def read_feature_map(path: str | Path) -> FeatureMap:
    arr = read_tensor(path)
    if arr.ndim != 4:
        raise ArtifactIOError(f"expected a rank-4 feature map, got dims {arr.shape}", str(path))
    return FeatureMap(arr)


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, payload: Any) -> Path:
    target = Path(path)
    ensure_dir(target.parent)
    try:
        target.write_text(dumps_json(payload), encoding="utf-8")
    except (OSError, ValueError) as exc:
        raise ArtifactIOError(f"cannot write JSON ({exc})", str(target)) from exc
    return target


def read_json(path: str | Path) -> Any:
    source = Path(path)
    if not source.is_file():
        raise ArtifactIOError("missing JSON artifact", str(source))
    try:
        return json.loads(source.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"cannot parse JSON ({exc})", str(source)) from exc


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> Path:
    target = Path(path)
    ensure_dir(target.parent)
    try:
        with target.open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")
    except (OSError, ValueError) as exc:
        raise ArtifactIOError(f"cannot write JSON lines ({exc})", str(target)) from exc
    return target


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    source = Path(path)
    if not source.is_file():
        raise ArtifactIOError("missing JSON-lines artifact", str(source))
    try:
        with source.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactIOError(f"cannot parse JSON lines ({exc})", str(source)) from exc


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable[Any]]) -> Path:
    target = Path(path)
    ensure_dir(target.parent)
    frame = pd.DataFrame([list(row) for row in rows], columns=header)
    try:
        frame.to_csv(target, index=False, lineterminator="\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write CSV ({exc.strerror})", str(target)) from exc
    return target
