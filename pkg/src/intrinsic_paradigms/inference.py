"""Full-image decomposition by averaging tile decompositions.

A tile model is any callable mapping ``(N, 3, T, T)`` float64 tiles to
``(albedo (N,3,T,T), shading (N,1,T,T), color (N,3))``; it exposes
``tile_size``.  Images are averaged over a dithered grid of overlapping
tiles, over a set of scales and optionally over the eight rotations and
reflections of the square.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .fields import (D4, Decomposition, apply_d4, as_field, invert_d4, resize_bilinear,
                     resize_decomposition, transform_decomposition)
from .paradigms import make_rng
from .polish import PolishConfig, polish

ORBIT_MODES = ("none", "discrete_image", "discrete_tile")
POLISH_MODES = ("off", "per_scale_and_final")
SEED_MODES = ("sequential", "content")


@dataclass(frozen=True)
class AveragingConfig:
    n_tiles: int = 7
    n_scales: int = 3
    scale_span: tuple[float, float] = (1 / math.sqrt(2), math.sqrt(2))
    orbit_mode: str = "none"
    use_location_code: bool = True
    polish: str = "off"
    polish_iterations: int = 2
    seed: int = 0
    seed_mode: str = "sequential"  # "content": layout generators keyed on the oriented image bytes
    window_ramp: int = 40
    window_literal: bool = False

    def __post_init__(self):
        if self.n_tiles < 1 or self.n_scales < 1:
            raise ValueError("n_tiles and n_scales must be >= 1")
        lo, hi = self.scale_span
        if not 0.5 <= lo <= hi <= 2.0:
            raise ValueError("scale factors must lie in [0.5, 2]")
        for value, allowed, what in ((self.orbit_mode, ORBIT_MODES, "orbit_mode"),
                                     (self.polish, POLISH_MODES, "polish"),
                                     (self.seed_mode, SEED_MODES, "seed_mode")):
            if value not in allowed:
                raise ValueError(f"{what} must be one of {allowed}, got {value!r}")


_BBA = dict(n_tiles=15, n_scales=5)
INFERENCE_PRESETS = {
    "Base": {},
    "Ma01NP": {},
    "BBA": _BBA,
    "NP": {**_BBA, "use_location_code": False},
    "BBAP": {**_BBA, "polish": "per_scale_and_final"},
    "BBAF": {**_BBA, "polish": "per_scale_and_final", "orbit_mode": "discrete_image"},
    "BBAT": {**_BBA, "polish": "per_scale_and_final", "orbit_mode": "discrete_tile"},
}


def inference_preset(name: str, **overrides) -> AveragingConfig:
    try:
        base = INFERENCE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown inference preset {name!r}; known: {sorted(INFERENCE_PRESETS)}") from None
    return AveragingConfig(**{**base, **overrides})


# --- weights and layout ------------------------------------------------------------------


def ramp(j, reach: int = 40, literal: bool = False) -> np.ndarray:
    """Edge ramp at 1-indexed distance ``j`` from the window boundary.

    The bounded form rises as ``(1 - exp(-j/reach)) / (1 - exp(-1))`` and is 1
    beyond ``reach``.  ``literal=True`` evaluates ``(1 - exp(reach+1-j)) / (1 - exp(-1))``
    instead, which is negative near the boundary; it exists for inspection only.
    """
    j = np.asarray(j, dtype=np.float64)
    if literal:
        val = (1.0 - np.exp(reach + 1 - j)) / (1.0 - math.exp(-1.0))
    else:
        val = (1.0 - np.exp(-j / reach)) / (1.0 - math.exp(-1.0))
    return np.where(j <= reach, val, 1.0)


def weight_window(size: int = 128, reach: int = 40, literal: bool = False) -> np.ndarray:
    """``(1, size, size)`` blending window: pointwise minimum of the four edge ramps."""
    if size < 1:
        raise ValueError("size must be >= 1")
    j = np.arange(1, size + 1)
    x = np.minimum(ramp(j, reach, literal), ramp(j[::-1], reach, literal))
    return np.minimum(x[None, :], x[:, None])[None]


class TileLayout(NamedTuple):
    height: int
    width: int
    tile: int
    origins: tuple  # (y, x) top-left corners in tile-index order

    def coverage(self) -> np.ndarray:
        count = np.zeros((self.height, self.width), dtype=np.int64)
        for y, x in self.origins:
            count[y:y + self.tile, x:x + self.tile] += 1
        return count


def grid_count(extent: int, tile: int, n_t: int) -> int:
    """Tiles per axis: at least ``n_t``, raised until dithered neighbours must overlap."""
    span = extent - tile
    if span == 0:
        return n_t
    k = max(n_t, 2)
    while 1.5 * span / (k - 1) + 1 > tile:
        k += 1
    return k


def tile_grid(height: int, width: int, n_t: int, rng: np.random.Generator, tile: int = 128) -> TileLayout:
    """Dithered grid of in-bounds tiles spanning the image from border to border.

    Interior origins move by up to a quarter of the grid spacing on each axis;
    tiles in the first and last row/column stay flush with the border on that axis.
    """
    if height < tile or width < tile:
        raise ValueError(f"image {height}x{width} is smaller than the {tile}px tile")
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    ky, kx = grid_count(height, tile, n_t), grid_count(width, tile, n_t)
    base_y = np.linspace(0, height - tile, ky)
    base_x = np.linspace(0, width - tile, kx)
    sp_y = (height - tile) / (ky - 1) if ky > 1 else 0.0
    sp_x = (width - tile) / (kx - 1) if kx > 1 else 0.0
    origins = []
    for i in range(ky):
        for j in range(kx):
            dy, dx = rng.uniform(-0.25, 0.25, size=2)
            y = base_y[i] + (dy * sp_y if 0 < i < ky - 1 else 0.0)
            x = base_x[j] + (dx * sp_x if 0 < j < kx - 1 else 0.0)
            y = int(np.clip(np.rint(y), 0, height - tile))
            x = int(np.clip(np.rint(x), 0, width - tile))
            origins.append((y, x))
    layout = TileLayout(height, width, tile, tuple(origins))
    return layout


def scale_factors(n: int, span=(1 / math.sqrt(2), math.sqrt(2))) -> np.ndarray:
    """Geometrically spaced factors; the middle one is exactly 1 for odd ``n`` over a symmetric span."""
    if n == 1:
        return np.ones(1)
    f = np.exp(np.linspace(math.log(span[0]), math.log(span[1]), n))
    if n % 2 and abs(span[0] * span[1] - 1.0) < 1e-12:
        f[n // 2] = 1.0
    return f


# --- tile models ---------------------------------------------------------------------------


class ConstantModel:
    """Returns the same albedo, shading and color for every tile."""

    def __init__(self, albedo=(0.5, 0.5, 0.5), shading=0.5, color=(1.0, 1.0, 1.0), tile: int = 128,
                 use_location_code: bool = True):
        self.albedo = np.asarray(albedo, dtype=np.float64)
        self.shading = float(shading)
        self.color = np.asarray(color, dtype=np.float64)
        self.tile_size = tile
        self.use_location_code = use_location_code

    def __call__(self, tiles):
        n, t = len(tiles), self.tile_size
        return (np.broadcast_to(self.albedo[None, :, None, None], (n, 3, t, t)).copy(),
                np.full((n, 1, t, t), self.shading),
                np.broadcast_to(self.color, (n, 3)).copy())


class TileOrbitModel:
    """Averages ``g^-1 model(g tile)`` over all eight elements ``g``."""

    def __init__(self, model):
        self.model = model
        self.tile_size = model.tile_size
        self.use_location_code = getattr(model, "use_location_code", True)

    def __call__(self, tiles):
        acc_a = acc_s = acc_c = 0.0
        for g in D4:
            a, s, c = self.model(apply_d4(tiles, g))
            g_inv = invert_d4(g)
            acc_a = acc_a + apply_d4(a, g_inv)
            acc_s = acc_s + apply_d4(s, g_inv)
            acc_c = acc_c + c
        return acc_a / 8.0, acc_s / 8.0, acc_c / 8.0


# --- averaging -----------------------------------------------------------------------------


def average_translations(model, image, n_tiles: int, rng: np.random.Generator,
                         window: Optional[np.ndarray] = None) -> Decomposition:
    """Window-weighted average of tile decompositions over a dithered layout.

    Tile colors are spread over their tiles, so the result carries a per-pixel
    color field.
    """
    image = as_field(image, 3)
    t = model.tile_size
    layout = tile_grid(image.shape[1], image.shape[2], n_tiles, rng, t)
    w = weight_window(t) if window is None else window
    tiles = np.stack([image[:, y:y + t, x:x + t] for y, x in layout.origins])
    a, s, c = model(tiles)
    h, wd = image.shape[1:]
    acc_a = np.zeros((3, h, wd))
    acc_s = np.zeros((1, h, wd))
    acc_c = np.zeros((3, h, wd))
    acc_w = np.zeros((1, h, wd))
    for k, (y, x) in enumerate(layout.origins):
        sl = (slice(None), slice(y, y + t), slice(x, x + t))
        acc_a[sl] += a[k] * w
        acc_s[sl] += s[k] * w
        acc_c[sl] += c[k][:, None, None] * w
        acc_w[sl] += w
    if not np.all(acc_w > 0):
        raise AssertionError("tile layout left pixels uncovered")
    return Decomposition(acc_a / acc_w, acc_s / acc_w, acc_c / acc_w)


def _layout_rng(cfg: AveragingConfig, image: np.ndarray, orbit_index: int, scale_index: int):
    if cfg.seed_mode == "content":
        digest = hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).digest()
        words = np.frombuffer(digest[:16], dtype="<u4").tolist()
        return make_rng(cfg.seed, *words, scale_index)
    return make_rng(cfg.seed, orbit_index, scale_index)


def average_scales(model, image, cfg: AveragingConfig, orbit_index: int = 0) -> Decomposition:
    """Uniform average over rescaled copies of the image, each brought back to native size."""
    image = as_field(image, 3)
    h, w = image.shape[1:]
    t = model.tile_size
    pcfg = PolishConfig(cfg.polish_iterations)
    window = weight_window(t, cfg.window_ramp, cfg.window_literal)
    acc = None
    factors = scale_factors(cfg.n_scales, cfg.scale_span)
    for k, f in enumerate(factors):
        sh, sw = int(round(h * f)), int(round(w * f))
        if sh < t or sw < t:
            raise ValueError(f"scale {f:.4f} shrinks the {h}x{w} image below the {t}px tile")
        scaled = resize_bilinear(image, sh, sw)
        dec = average_translations(model, scaled, cfg.n_tiles, _layout_rng(cfg, image, orbit_index, k), window)
        if cfg.polish != "off":
            dec = polish(scaled, dec, pcfg)
        dec = resize_decomposition(dec, h, w)
        if acc is None:
            acc = [dec.albedo, dec.shading, dec.color_field()]
        else:
            acc = [acc[0] + dec.albedo, acc[1] + dec.shading, acc[2] + dec.color_field()]
    n = len(factors)
    return Decomposition(acc[0] / n, acc[1] / n, acc[2] / n)


def orbit_average(model, image, cfg: AveragingConfig) -> Decomposition:
    image = as_field(image, 3)
    if cfg.orbit_mode == "discrete_tile":
        return average_scales(TileOrbitModel(model), image, cfg)
    if cfg.orbit_mode == "none":
        return average_scales(model, image, cfg)
    acc = None
    for gi, g in enumerate(D4):
        dec = average_scales(model, apply_d4(image, g), cfg, orbit_index=gi)
        dec = transform_decomposition(dec, invert_d4(g))
        parts = [dec.albedo, dec.shading, dec.color_field()]
        acc = parts if acc is None else [u + v for u, v in zip(acc, parts)]
    return Decomposition(*(p / 8.0 for p in acc))


def decompose_image(model, image, cfg: AveragingConfig = AveragingConfig()) -> Decomposition:
    """Averaged decomposition with residual attached."""
    image = as_field(image, 3)
    model_code = getattr(model, "use_location_code", cfg.use_location_code)
    if model_code != cfg.use_location_code:
        raise ValueError(f"averaging config expects use_location_code={cfg.use_location_code}, "
                         f"model was built with {model_code}")
    dec = orbit_average(model, image, cfg)
    if cfg.polish != "off":
        return polish(image, dec, PolishConfig(cfg.polish_iterations))
    return dec.with_residual(image)


def with_seed(cfg: AveragingConfig, seed: int) -> AveragingConfig:
    return replace(cfg, seed=seed)
