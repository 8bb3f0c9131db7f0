"""Checkpoint file format: one JSON header line, then raw tensor buffers.

Layout::

    {"format_version": 1, "entries": [{"name", "shape", "dtype", "byte_offset",
     "byte_len"}, ...], "extra": {...}}\\n
    <little-endian IEEE-754 buffers>

``byte_offset`` is relative to the first byte after the header's newline, so
the header can be written in one pass. ``dtype`` is "f32" or "f64". ``extra``
is an optional JSON object for run metadata (e.g. the config snapshot); it is
ignored by tensor loading. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from fasdg.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from fasdg.tensor import Tensor

FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(weights: dict[str, Tensor], path, extra: dict | None = None) -> None:
    """Write named tensors (and optional metadata) to ``path``."""
    entries = []
    buffers = []
    offset = 0
    for name, t in weights.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype(_TAG_DTYPES[tag], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": tag,
                "byte_offset": offset,
                "byte_len": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "entries": entries}
    if extra is not None:
        header["extra"] = extra
    blob = json.dumps(header).encode("utf-8") + b"\n" + b"".join(buffers)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint into {name: array} plus its ``extra`` metadata."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: no header line found")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {version!r}, expected {FORMAT_VERSION}"
        )
    payload = blob[nl + 1 :]
    out: dict[str, np.ndarray] = {}
    for entry in header.get("entries", []):
        name = entry["name"]
        tag = entry["dtype"]
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype {tag!r}")
        start, length = entry["byte_offset"], entry["byte_len"]
        if start < 0 or start + length > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: tensor '{name}' needs bytes [{start}, {start + length}) "
                f"but payload has {len(payload)}"
            )
        dtype = _TAG_DTYPES[tag]
        shape = tuple(entry["shape"])
        n_expected = int(np.prod(shape)) if shape else 1
        if length != n_expected * dtype.itemsize:
            raise CheckpointShapeError(
                f"{path}: tensor '{name}' declares shape {shape} but {length} bytes"
            )
        arr = np.frombuffer(payload[start : start + length], dtype=dtype).reshape(shape)
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out, header.get("extra", {})


def load_into(weights: dict[str, Tensor], path) -> dict:
    """Load a checkpoint into existing tensors, validating names/shapes/dtypes.

    Returns the checkpoint's ``extra`` metadata. Any mismatch between the file
    and the model built from the configuration is a named error.
    """
    arrays, extra = load_checkpoint(path)
    missing = set(weights) - set(arrays)
    unexpected = set(arrays) - set(weights)
    if missing or unexpected:
        raise CheckpointShapeError(
            f"{path}: tensor name mismatch; missing {sorted(missing)}, "
            f"unexpected {sorted(unexpected)}"
        )
    for name, t in weights.items():
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise CheckpointShapeError(
                f"{path}: tensor '{name}' has shape {arr.shape}, config expects {t.data.shape}"
            )
        if arr.dtype != t.data.dtype:
            raise CheckpointShapeError(
                f"{path}: tensor '{name}' has dtype {arr.dtype}, config expects {t.data.dtype}"
            )
        t.data = arr
    return extra
