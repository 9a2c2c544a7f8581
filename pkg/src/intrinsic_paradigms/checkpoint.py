"""Checkpoint container: ``manifest.json`` plus one IIKF tensor per parameter block.

Blocks are stored flattened as ``(1, 1, numel)`` float32; the manifest
records each block's file and shape, so float32 parameters round-trip
bit-exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .io import FieldFormatError, read_iikf, read_json, write_iikf, write_json

MANIFEST = "manifest.json"


def save_bundle(path, blocks: Mapping[str, object], manifest: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, (name, value) in enumerate(blocks.items()):
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        fname = f"block_{i:04d}.iikf"
        write_iikf(path / fname, arr.astype(np.float32).reshape(1, 1, -1))
        index[name] = {"file": fname, "shape": list(arr.shape)}
    write_json(path / MANIFEST, {**manifest, "blocks": index})
    return path


def load_bundle(path) -> tuple[dict, dict]:
    """Returns ``(blocks, manifest)``; blocks are float32 numpy arrays."""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"{path}: not a checkpoint (no manifest)")
    try:
        manifest = read_json(path / MANIFEST)
        index = manifest["blocks"]
    except (ValueError, KeyError) as exc:
        raise FieldFormatError(f"{path}: corrupt manifest ({exc})") from exc
    blocks = {}
    for name, entry in index.items():
        arr = read_iikf(path / entry["file"])
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise FieldFormatError(f"{path}: block {name} has {arr.size} values, expected shape {shape}")
        blocks[name] = arr.reshape(shape)
    return blocks, manifest


def subset(blocks: Mapping[str, np.ndarray], prefix: str) -> dict:
    """Blocks under ``prefix.``, with the prefix stripped, as tensors."""
    n = len(prefix) + 1
    return {k[n:]: torch.from_numpy(np.array(v)) for k, v in blocks.items() if k.startswith(prefix + ".")}


def prefixed(prefix: str, params: Mapping) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}
