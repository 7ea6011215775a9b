"""GVCK checkpoint files and trajectory directories."""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..autodiff import FlatParams, ParamLayout
from ..errors import FormatError

CHECKPOINT_MAGIC = b"GVCK"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_checkpoint(values: np.ndarray) -> bytes:
    body = _HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, values.shape[0])
    body += np.asarray(values, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> np.ndarray:
    if len(data) < _HEAD.size:
        raise FormatError(f"truncated checkpoint: header needs {_HEAD.size} bytes, file has {len(data)}",
                          offset=len(data))
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    expected = _HEAD.size + 8 * count + 4
    if len(data) != expected:
        raise FormatError(f"checkpoint length mismatch: expected {expected} bytes, got {len(data)}",
                          offset=min(len(data), expected))
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != crc:
        raise FormatError("checkpoint checksum mismatch", offset=expected - 4)
    return np.frombuffer(data, "<f8", count, _HEAD.size).astype(np.float64)


def save_checkpoint(path, params: FlatParams, write_layout: bool = True) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(params.values))
    if write_layout:
        sidecar_path(path).write_text(json.dumps(params.layout.to_json(), indent=1))
    return path


def load_checkpoint(path, layout: ParamLayout | None = None) -> FlatParams:
    """Read a GVCK file; the layout comes from ``layout`` or the JSON sidecar."""
    path = Path(path)
    values = decode_checkpoint(path.read_bytes())
    if layout is None:
        side = sidecar_path(path)
        if not side.exists():
            raise FormatError(f"no layout given and no sidecar {side.name} next to {path.name}")
        layout = ParamLayout.from_json(json.loads(side.read_text()))
    return FlatParams(values, layout)


def checkpoint_name(iteration: int) -> str:
    return f"iter_{iteration:06d}.gvck"
