"""Reading and writing fields: PNG for viewing, IIKF for lossless storage.

IIKF layout (little endian)::

    b"IIKF" | u32 channels | u32 height | u32 width | f32 data[C*H*W] (C order)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"IIKF"
_HEADER = struct.Struct("<4sIII")


class FieldFormatError(ValueError):
    """A tensor file is truncated, corrupt or of the wrong kind."""


def write_iikf(path, field) -> None:
    arr = np.asarray(field)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"IIKF stores (C, H, W) fields, got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *data.shape))
        fh.write(data.tobytes())


def read_iikf(path) -> np.ndarray:
    """Load an IIKF tensor as float32 ``(C, H, W)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FieldFormatError(f"{path}: truncated header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise FieldFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG linearly into ``[0, 1]``; RGB gives 3 channels, gray 1."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return arr[None]
        if im.mode in ("L", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            return arr[None]
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, field, bits: int = 8) -> None:
    """Write a 1- or 3-channel field, clipping to ``[0, 1]``."""
    arr = np.clip(np.asarray(field, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] not in (1, 3):
        raise ValueError("PNG output needs 1 or 3 channels")
    if bits == 16:
        if arr.shape[0] != 1:
            raise ValueError("16-bit output is supported for gray fields only")
        Image.fromarray(np.round(arr[0] * 65535).astype(np.uint16)).save(path)
        return
    q = np.round(arr * 255).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
