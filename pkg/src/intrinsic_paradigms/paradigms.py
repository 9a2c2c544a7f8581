"""Procedural albedo, shading and illuminant-color samples ("paradigms").

Every sampler is a pure function of an explicit ``numpy.random.Generator``
and its inputs.  Generators are built on the counter-based Philox bit
generator (:func:`make_rng`) so cached samples are portable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import as_field, compose

RNG_NAME = "numpy.random.Philox"


def make_rng(*key: int) -> np.random.Generator:
    """A Philox generator keyed by one or more non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class ParadigmConfig:
    tile: int = 128
    # albedo kd tree
    d_max: int = 6
    p_min: int = 1000
    # albedo mondrian of rotated mondrians
    n_m: int = 4
    mondrian_lines: tuple[int, int] = (2, 6)
    mondrian_dict_size: int = 16
    # shading
    d_smax: int = 6
    p_smin: int = 1000
    shading_n_m: int = 4
    max_masks: int = 4
    s_min: float = 0.2
    s_max: float = 1.0
    sigmas: tuple[float, ...] = (3, 6, 12, 16, 24)
    sigma_weights: tuple[float, ...] = (0.2, 0.2, 0.4, 1.0, 1.0)
    gaussian_truncate: float = 4.0
    # illuminant color
    color_clip: tuple[float, float] = (0.05, 2.0)
    # pool colors are capped so albedo stays in the decomposer's [0, 1] range
    pool_clip: Optional[float] = 1.0
    dict_size: int = 4000

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError("tile must be positive")
        if not 0 <= self.s_min < self.s_max:
            raise ValueError("need 0 <= s_min < s_max")
        if len(self.sigmas) != len(self.sigma_weights):
            raise ValueError("sigmas and sigma_weights differ in length")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigmas must be strictly increasing")
        if min(self.p_min, self.d_max, self.n_m, self.p_smin, self.d_smax, self.shading_n_m) < 1:
            raise ValueError("p_min, d_max, n_m (and shading counterparts) must be >= 1")
        lo, hi = self.mondrian_lines
        if not 0 <= lo <= hi:
            raise ValueError("mondrian_lines must be an increasing pair")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# named variants of the paradigm
PARADIGM_PRESETS = {
    "default": {},
    "Dark": {"s_min": 0.05},
    "AlbFrag": {"d_max": 9, "p_min": 100},
    "ShaFrag": {"shading_n_m": 16},
}


def paradigm_preset(name: str, **overrides) -> ParadigmConfig:
    try:
        base = PARADIGM_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown paradigm preset {name!r}") from None
    return ParadigmConfig(**{**base, **overrides})


# --- surface colors ---------------------------------------------------------------


@dataclass
class ColorPool:
    colors: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) == 0:
            raise ValueError("color pool is empty")
        if not np.all(np.isfinite(self.colors)) or np.any(self.colors < 0):
            raise ValueError("pool colors must be finite and non-negative")

    def __len__(self):
        return len(self.colors)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.colors[rng.integers(0, len(self.colors), size=n)]


def build_color_pool(images: Sequence, n_samples: int, rng: np.random.Generator,
                     floor: float = 1e-3, clip: Optional[float] = 1.0) -> ColorPool:
    """Draw pixel colors uniformly over (image, location), divided by sqrt(intensity).

    Intensity is the channel mean, floored at ``floor``.  ``clip`` caps the
    resulting components (``None`` disables the cap).
    """
    if len(images) == 0:
        raise ValueError("need at least one image to build a color pool")
    fields = [as_field(im, 3) for im in images]
    idx = rng.integers(0, len(fields), size=n_samples)
    out = np.empty((n_samples, 3))
    for k, i in enumerate(idx):
        f = fields[i]
        y = rng.integers(0, f.shape[1])
        x = rng.integers(0, f.shape[2])
        out[k] = f[:, y, x]
    intensity = np.maximum(out.mean(axis=1, keepdims=True), floor)
    out = out / np.sqrt(intensity)
    if clip is not None:
        out = np.minimum(out, clip)
    return ColorPool(out)


# --- spatial models ---------------------------------------------------------------


def kd_partition(rng: np.random.Generator, height: int, width: int,
                 d_max: int, p_min: int) -> np.ndarray:
    """Random kd-tree leaves as an integer label map.

    Cells split while depth < ``d_max`` and both children keep at least
    ``p_min`` pixels.  The split axis alternates from a random start (falling
    back to the other axis when the preferred one has no valid position);
    the position is uniform over the valid range.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    start_axis = int(rng.integers(0, 2))
    leaves = []

    def split(r0, r1, c0, c1, depth):
        if depth < d_max:
            preferred = (start_axis + depth) % 2
            for axis in (preferred, 1 - preferred):
                if axis == 0:
                    lo, extent, other = r0, r1 - r0, c1 - c0
                else:
                    lo, extent, other = c0, c1 - c0, r1 - r0
                need = -(-p_min // other)  # ceil
                first, last = lo + need, lo + extent - need
                if first <= last:
                    pos = int(rng.integers(first, last + 1))
                    if axis == 0:
                        split(r0, pos, c0, c1, depth + 1)
                        split(pos, r1, c0, c1, depth + 1)
                    else:
                        split(r0, r1, c0, pos, depth + 1)
                        split(r0, r1, pos, c1, depth + 1)
                    return
        leaves.append((r0, r1, c0, c1))

    split(0, height, 0, width, 0)
    for k, (r0, r1, c0, c1) in enumerate(leaves):
        labels[r0:r1, c0:c1] = k
    return labels


def sample_albedo_kd(rng: np.random.Generator, pool: ColorPool, cfg: ParadigmConfig) -> np.ndarray:
    labels = kd_partition(rng, cfg.tile, cfg.tile, cfg.d_max, cfg.p_min)
    colors = pool.draw(rng, labels.max() + 1)
    return np.ascontiguousarray(colors[labels].transpose(2, 0, 1))


@dataclass
class RotatedMondrian:
    """A rotated axis-aligned grid, rasterised (nearest neighbour) to a tile."""

    labels: np.ndarray  # (tile, tile) ints
    colors: Optional[np.ndarray] = None  # (n_labels, 3)


def make_rotated_mondrian(rng: np.random.Generator, tile: int, pool: Optional[ColorPool] = None,
                          lines: tuple[int, int] = (2, 6)) -> RotatedMondrian:
    """Random grid on a canvas large enough that every rotation covers the tile."""
    side = math.ceil(tile * math.sqrt(2)) + 2
    n_y = int(rng.integers(lines[0], lines[1] + 1))
    n_x = int(rng.integers(lines[0], lines[1] + 1))
    cuts_y = np.sort(rng.uniform(0, side, n_y))
    cuts_x = np.sort(rng.uniform(0, side, n_x))
    theta = rng.uniform(0.0, math.pi)
    centre = np.arange(tile) + 0.5 - tile / 2
    yy, xx = np.meshgrid(centre, centre, indexing="ij")
    cos, sin = math.cos(theta), math.sin(theta)
    xs = cos * xx - sin * yy + side / 2
    ys = sin * xx + cos * yy + side / 2
    labels = np.searchsorted(cuts_y, ys) * (n_x + 1) + np.searchsorted(cuts_x, xs)
    colors = None if pool is None else pool.draw(rng, (n_y + 1) * (n_x + 1))
    return RotatedMondrian(labels.astype(np.int64), colors)


def build_mondrian_dictionary(rng: np.random.Generator, cfg: ParadigmConfig, size: int,
                              pool: Optional[ColorPool] = None) -> list[RotatedMondrian]:
    return [make_rotated_mondrian(rng, cfg.tile, pool, cfg.mondrian_lines) for _ in range(size)]


def _grid_cuts(rng, tile, n_c):
    inner = np.sort(rng.choice(np.arange(1, tile), size=n_c - 1, replace=False)) if n_c > 1 else []
    return [0, *map(int, inner), tile]


def mondrian_of_mondrians(rng: np.random.Generator, mondrians: Sequence[RotatedMondrian],
                          tile: int, n_c: int):
    """Fill an ``n_c`` x ``n_c`` grid with blocks cropped from random dictionary entries.

    Returns ``(labels, sources)`` where ``sources[label] = (entry, local_label)``.
    """
    n_c = min(n_c, tile)
    rows = _grid_cuts(rng, tile, n_c)
    cols = _grid_cuts(rng, tile, n_c)
    labels = np.empty((tile, tile), dtype=np.int64)
    sources = []
    for r0, r1 in zip(rows, rows[1:]):
        for c0, c1 in zip(cols, cols[1:]):
            e = int(rng.integers(0, len(mondrians)))
            oy = int(rng.integers(0, tile - (r1 - r0) + 1))
            ox = int(rng.integers(0, tile - (c1 - c0) + 1))
            block = mondrians[e].labels[oy:oy + r1 - r0, ox:ox + c1 - c0]
            uniq, inv = np.unique(block, return_inverse=True)
            labels[r0:r1, c0:c1] = inv.reshape(block.shape) + len(sources)
            sources.extend((e, int(u)) for u in uniq)
    return labels, sources


def sample_albedo_mondrian(rng: np.random.Generator, pool: ColorPool, cfg: ParadigmConfig,
                           mondrians: Optional[Sequence[RotatedMondrian]] = None,
                           n_c: Optional[int] = None) -> np.ndarray:
    if mondrians is None:
        mondrians = build_mondrian_dictionary(rng, cfg, cfg.mondrian_dict_size, pool)
    if n_c is None:
        n_c = int(rng.integers(1, cfg.n_m + 1))
    labels, sources = mondrian_of_mondrians(rng, mondrians, cfg.tile, n_c)
    palette = np.array([mondrians[e].colors[k] for e, k in sources])
    return np.ascontiguousarray(palette[labels].transpose(2, 0, 1))


def sample_albedo(rng: np.random.Generator, pool: ColorPool, cfg: ParadigmConfig,
                  mondrians: Optional[Sequence[RotatedMondrian]] = None) -> np.ndarray:
    """Even mixture of the kd-tree and mondrian albedo models."""
    if rng.random() < 0.5:
        return sample_albedo_kd(rng, pool, cfg)
    return sample_albedo_mondrian(rng, pool, cfg, mondrians)


# --- shading ------------------------------------------------------------------------


def build_perlin_dictionaries(rng: np.random.Generator, cfg: ParadigmConfig,
                              entries_per_sigma: int = 200) -> list[np.ndarray]:
    """One dictionary per smoothing scale of unit-normal noise, each ``(n, tile, tile)``."""
    if entries_per_sigma < 1:
        raise ValueError("entries_per_sigma must be >= 1")
    dicts = []
    for sigma in cfg.sigmas:
        d = np.empty((entries_per_sigma, cfg.tile, cfg.tile), dtype=np.float32)
        for k in range(entries_per_sigma):
            noise = rng.standard_normal((cfg.tile, cfg.tile))
            d[k] = gaussian_filter(noise, sigma, mode="reflect", truncate=cfg.gaussian_truncate)
        dicts.append(d)
    return dicts


def sample_shading_component(rng: np.random.Generator, dicts: Sequence[np.ndarray],
                             cfg: ParadigmConfig) -> np.ndarray:
    out = np.zeros((1, cfg.tile, cfg.tile))
    for d, w in zip(dicts, cfg.sigma_weights):
        out[0] += w * d[rng.integers(0, len(d))]
    return out


def rescale_range(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map so the minimum is ``lo`` and the maximum ``hi``; constants go to the midpoint."""
    mn, mx = field.min(), field.max()
    if mx - mn <= 1e-12 * max(1.0, abs(mx)):
        return np.full_like(field, 0.5 * (lo + hi))
    # clip: values a rounding step below the maximum can land just past hi
    out = np.clip(lo + (field - mn) * ((hi - lo) / (mx - mn)), lo, hi)
    out[field == mn] = lo
    out[field == mx] = hi
    return out


def shading_mask(rng: np.random.Generator, cfg: ParadigmConfig,
                 mondrians: Optional[Sequence[RotatedMondrian]] = None) -> np.ndarray:
    """A kd-tree leaf or a mondrian cell, chosen by fair coin, as a boolean mask."""
    if rng.random() < 0.5:
        labels = kd_partition(rng, cfg.tile, cfg.tile, cfg.d_smax, cfg.p_smin)
    else:
        if mondrians is None:
            mondrians = build_mondrian_dictionary(rng, cfg, cfg.mondrian_dict_size)
        n_c = int(rng.integers(1, cfg.shading_n_m + 1))
        labels, _ = mondrian_of_mondrians(rng, mondrians, cfg.tile, n_c)
    return labels == rng.integers(0, labels.max() + 1)


def sample_shading(rng: np.random.Generator, dicts: Sequence[np.ndarray], cfg: ParadigmConfig,
                   mondrians: Optional[Sequence[RotatedMondrian]] = None,
                   n_masks: Optional[int] = None) -> np.ndarray:
    """Smooth noise background with sharp-edged replacement regions, rescaled to [s_min, s_max]."""
    out = sample_shading_component(rng, dicts, cfg)
    if n_masks is None:
        n_masks = int(rng.integers(0, cfg.max_masks + 1))
    for _ in range(n_masks):
        mask = shading_mask(rng, cfg, mondrians)
        out[0][mask] = sample_shading_component(rng, dicts, cfg)[0][mask]
    return rescale_range(out, cfg.s_min, cfg.s_max)


def sample_color(rng: np.random.Generator, clip: tuple[float, float] = (0.05, 2.0)) -> np.ndarray:
    """Gray plus isotropic Gaussian perturbation, clamped to positive values."""
    return np.clip(0.5 + 0.5 * rng.standard_normal(3), *clip)


# --- training examples -------------------------------------------------------------------


@dataclass
class ParadigmExample:
    albedo: np.ndarray
    shading: np.ndarray
    color: np.ndarray
    image: np.ndarray = field(init=False)

    def __post_init__(self):
        self.image = compose(self.albedo, self.shading, self.color)


def sample_example(rng: np.random.Generator, pool: ColorPool, dicts: Sequence[np.ndarray],
                   cfg: ParadigmConfig) -> ParadigmExample:
    albedo = sample_albedo(rng, pool, cfg)
    shading = sample_shading(rng, dicts, cfg)
    return ParadigmExample(albedo, shading, sample_color(rng, cfg.color_clip))


class ParadigmSampler:
    """Binds a pool, noise dictionaries and a rotated-mondrian dictionary for fast repeated draws."""

    def __init__(self, pool: ColorPool, cfg: ParadigmConfig, seed: int = 0,
                 entries_per_sigma: int = 200, mondrian_entries: int = 64):
        self.pool = pool
        self.cfg = cfg
        rng = make_rng(seed, 0)
        self.perlin = build_perlin_dictionaries(rng, cfg, entries_per_sigma)
        self.albedo_mondrians = build_mondrian_dictionary(rng, cfg, mondrian_entries, pool)
        self.mask_mondrians = build_mondrian_dictionary(rng, cfg, mondrian_entries)

    def albedo(self, rng) -> np.ndarray:
        return sample_albedo(rng, self.pool, self.cfg, self.albedo_mondrians)

    def shading(self, rng) -> np.ndarray:
        return sample_shading(rng, self.perlin, self.cfg, self.mask_mondrians)

    def color(self, rng) -> np.ndarray:
        return sample_color(rng, self.cfg.color_clip)

    def example(self, rng) -> ParadigmExample:
        return ParadigmExample(self.albedo(rng), self.shading(rng), self.color(rng))
