"""Field arithmetic for the multiplicative image model.

A field is a ``(channels, height, width)`` float array.  Images are
``albedo * shading * color`` pointwise, with a 3-channel albedo, a
1-channel shading and either a constant 3-vector or a per-pixel 3-channel
color field.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np


class FieldShapeError(ValueError):
    """Raised when fields that must line up spatially do not."""


def as_field(x, channels: Optional[int] = None) -> np.ndarray:
    """Coerce ``x`` to a float64 ``(C, H, W)`` array; a 2-D input gets one channel."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FieldShapeError(f"expected a (C, H, W) field, got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise FieldShapeError(f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def _color_term(color, height: int, width: int) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    if c.shape == (3,):
        return c[:, None, None]
    c = as_field(c, 3)
    if c.shape[1:] != (height, width):
        raise FieldShapeError(f"color field {c.shape} does not match {(height, width)}")
    return c


def compose(albedo, shading, color) -> np.ndarray:
    """Render ``albedo * shading * color``."""
    a = as_field(albedo, 3)
    s = as_field(shading, 1)
    if a.shape[1:] != s.shape[1:]:
        raise FieldShapeError(f"albedo {a.shape} and shading {s.shape} differ spatially")
    return a * s * _color_term(color, *a.shape[1:])


@dataclass(frozen=True)
class Decomposition:
    """Albedo (3ch), shading (1ch) and illuminant color.

    ``color`` is a 3-vector for a single tile or a ``(3, H, W)`` field once
    tile estimates have been averaged.
    """

    albedo: np.ndarray
    shading: np.ndarray
    color: np.ndarray
    residual: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.albedo.shape[1], self.albedo.shape[2]

    def color_field(self) -> np.ndarray:
        c = np.asarray(self.color, dtype=np.float64)
        if c.ndim == 1:
            return np.broadcast_to(c[:, None, None], (3,) + self.shape).copy()
        return c

    def render(self) -> np.ndarray:
        return compose(self.albedo, self.shading, self.color)

    def with_residual(self, image) -> "Decomposition":
        return replace(self, residual=residual(image, self))


def residual(image, decomposition: Decomposition) -> np.ndarray:
    """``image - albedo * shading * color``."""
    img = as_field(image, 3)
    rendered = decomposition.render()
    if img.shape != rendered.shape:
        raise FieldShapeError(f"image {img.shape} does not match decomposition {rendered.shape}")
    return img - rendered


def huber(t, beta: float = 1.0):
    """Elementwise mixed L1/L2 penalty: quadratic inside ``|t| <= beta``, linear outside."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(t <= beta, 0.5 * t * t / beta, t - 0.5 * beta)


def compare_mixed(u, v, beta: float = 1.0) -> float:
    """Mean mixed L1/L2 penalty of ``u - v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise FieldShapeError(f"cannot compare {u.shape} with {v.shape}")
    return float(np.mean(huber(u - v, beta)))


def range_penalty(field, t: float, side: str = "upper", literal: bool = False) -> float:
    """Summed hinge-squared penalty for values crossing ``t``.

    ``side="upper"`` penalises values above ``t`` and ``side="lower"``
    values below it.  ``literal=True`` evaluates ``sum(min(0, x - t)**2)``
    exactly as the formula is usually printed, which penalises values
    *below* ``t``; it is kept only for inspection.
    """
    x = np.asarray(field, dtype=np.float64)
    if literal:
        return float(np.sum(np.minimum(0.0, x - t) ** 2))
    if side == "upper":
        return float(np.sum(np.maximum(0.0, x - t) ** 2))
    if side == "lower":
        return float(np.sum(np.maximum(0.0, t - x) ** 2))
    raise ValueError(f"side must be 'upper' or 'lower', not {side!r}")


def unit_range_penalty(field) -> float:
    """Penalty for leaving ``[0, 1]``: both range terms together."""
    return range_penalty(field, 1.0, "upper") + range_penalty(field, 0.0, "lower")


# --- the dihedral group of the square ------------------------------------------


class D4Element(NamedTuple):
    """Counter-clockwise rotation by ``rotation`` quarter turns, applied after an
    optional left-right reflection."""

    rotation: int = 0
    reflect: bool = False


D4 = tuple(D4Element(k, r) for r in (False, True) for k in range(4))
IDENTITY = D4Element(0, False)


def apply_d4(field, g: D4Element) -> np.ndarray:
    """Apply ``g`` to the two spatial axes of a field (or to a 2-D array)."""
    arr = np.asarray(field)
    h_axis, w_axis = arr.ndim - 2, arr.ndim - 1
    if g.reflect:
        arr = np.flip(arr, axis=w_axis)
    arr = np.rot90(arr, g.rotation % 4, axes=(h_axis, w_axis))
    return np.ascontiguousarray(arr)


@lru_cache(maxsize=None)
def _probe_table() -> dict:
    probe = np.arange(12, dtype=np.float64).reshape(3, 4)
    return {apply_d4(probe, g).tobytes() + bytes(apply_d4(probe, g).shape): g for g in D4}


def _lookup(arr: np.ndarray) -> D4Element:
    return _probe_table()[arr.tobytes() + bytes(arr.shape)]


def compose_d4(g: D4Element, h: D4Element) -> D4Element:
    """The element equal to applying ``h`` first, then ``g``."""
    probe = np.arange(12, dtype=np.float64).reshape(3, 4)
    return _lookup(apply_d4(apply_d4(probe, h), g))


def invert_d4(g: D4Element) -> D4Element:
    for h in D4:
        if compose_d4(h, g) == IDENTITY:
            return h
    raise AssertionError("D4 element without inverse")  # unreachable


def transform_decomposition(dec: Decomposition, g: D4Element) -> Decomposition:
    color = dec.color if np.ndim(dec.color) == 1 else apply_d4(dec.color, g)
    res = None if dec.residual is None else apply_d4(dec.residual, g)
    return Decomposition(apply_d4(dec.albedo, g), apply_d4(dec.shading, g), color, res)


# --- resampling -----------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = x - lo
    return lo, hi, frac


def resize_bilinear(field, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centres and clamped borders."""
    f = as_field(field)
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be at least 1x1")
    _, h, w = f.shape
    if (h, w) == (new_h, new_w):
        return f.copy()
    lo, hi, t = _axis_weights(h, new_h)
    rows = f[:, lo, :] * (1.0 - t)[None, :, None] + f[:, hi, :] * t[None, :, None]
    lo, hi, t = _axis_weights(w, new_w)
    return rows[:, :, lo] * (1.0 - t)[None, None, :] + rows[:, :, hi] * t[None, None, :]


def resize_decomposition(dec: Decomposition, new_h: int, new_w: int) -> Decomposition:
    color = dec.color if np.ndim(dec.color) == 1 else resize_bilinear(dec.color, new_h, new_w)
    return Decomposition(
        resize_bilinear(dec.albedo, new_h, new_w),
        resize_bilinear(dec.shading, new_h, new_w),
        color,
    )


def check_finite(field, what: str = "field") -> None:
    if not np.all(np.isfinite(field)):
        raise FloatingPointError(f"{what} contains non-finite values")
