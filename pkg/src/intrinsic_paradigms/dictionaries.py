"""Cached, seed-reproducible tile dictionaries and their on-disk form.

A dictionary directory holds ``entry_00000.iikf`` ... plus ``manifest.json``
recording kind, count, seed, config digest and the RNG algorithm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .io import FieldFormatError, read_iikf, read_json, read_png, write_iikf, write_json
from .paradigms import RNG_NAME, make_rng

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass
class TileDictionary:
    """``entries`` is an ``(n, C, T, T)`` float32 stack."""

    kind: str
    entries: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 4 or len(self.entries) == 0:
            raise ValueError("a dictionary needs a non-empty (n, C, T, T) stack")

    def __len__(self):
        return len(self.entries)

    @property
    def tile(self) -> int:
        return self.entries.shape[-1]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.entries[rng.integers(0, len(self.entries), size=n)]

    def draw_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, len(self.entries), size=n)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, e in enumerate(self.entries):
            write_iikf(path / f"entry_{i:05d}.iikf", e)
        write_json(path / MANIFEST, {**self.meta, "kind": self.kind, "count": len(self),
                                     "channels": int(self.entries.shape[1]), "tile": self.tile,
                                     "rng": RNG_NAME})
        return path

    @classmethod
    def load(cls, path, tile: Optional[int] = None) -> "TileDictionary":
        path = Path(path)
        if not (path / MANIFEST).is_file():
            raise FileNotFoundError(f"{path}: no dictionary manifest")
        try:
            meta = read_json(path / MANIFEST)
            count = int(meta["count"])
        except (ValueError, KeyError) as exc:
            raise FieldFormatError(f"{path}: unreadable manifest ({exc})") from exc
        entries = []
        for i in range(count):
            f = path / f"entry_{i:05d}.iikf"
            if not f.is_file():
                raise FieldFormatError(f"{path}: manifest lists {count} entries but {f.name} is missing")
            entries.append(read_iikf(f))
        stack = np.stack(entries)
        if tile is not None and stack.shape[-2:] != (tile, tile):
            raise FieldFormatError(f"{path}: tiles are {stack.shape[-2:]}, expected {tile}x{tile}")
        kind = meta.pop("kind", "unknown")
        return cls(kind, stack, meta)


def build_dictionary(source: Callable[[np.random.Generator], np.ndarray], size: int, seed: int,
                     kind: str = "albedo", meta: Optional[dict] = None) -> TileDictionary:
    """Materialise ``size`` draws of ``source``; entry ``i`` uses the generator keyed ``(seed, i)``."""
    if size < 1:
        raise ValueError("dictionary size must be >= 1")
    entries = [np.asarray(source(make_rng(seed, i)), dtype=np.float32) for i in range(size)]
    return TileDictionary(kind, np.stack(entries), {"seed": seed, **(meta or {})})


def _load_tile(path: Path) -> np.ndarray:
    if path.suffix == ".iikf":
        return read_iikf(path)
    return read_png(path).astype(np.float32)


def ingest_tile_dictionary(path, tile: int = 128) -> tuple[TileDictionary, TileDictionary, bool]:
    """Load externally produced albedo/shading tiles.

    ``path`` holds ``albedo/`` and ``shading/`` folders of ``.png`` or
    ``.iikf`` tiles.  When both folders contain the same file stems the
    pairing is kept (``paired=True``) so albedo and shading can be drawn
    together; otherwise they are drawn independently.
    """
    path = Path(path)
    out = {}
    for kind, channels in (("albedo", 3), ("shading", 1)):
        folder = path / kind
        files = sorted(p for p in folder.glob("*") if p.suffix in (".png", ".iikf"))
        if not files:
            raise FileNotFoundError(f"{folder}: no tiles found")
        tiles = []
        for f in files:
            t = _load_tile(f)
            if t.shape[-2:] != (tile, tile):
                raise FieldFormatError(f"{f}: tile is {t.shape[-2:]}, expected {tile}x{tile}")
            if kind == "shading" and t.shape[0] == 3:
                t = t.mean(axis=0, keepdims=True)
            if t.shape[0] != channels:
                raise FieldFormatError(f"{f}: expected {channels} channels, found {t.shape[0]}")
            tiles.append(t)
        out[kind] = (TileDictionary(kind, np.stack(tiles), {"source": str(folder)}), [f.stem for f in files])
    paired = out["albedo"][1] == out["shading"][1]
    return out["albedo"][0], out["shading"][0], paired
