"""Pointwise residual polishing.

Per pixel, with effective albedo ``at = a * c`` and residual
``r = I - at * s``, the update is the smallest ``(ds, dat)`` in the sense
of ``ds**2 + |dat|**2`` that satisfies the linearised constraint
``at * ds + s * dat = r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Decomposition, as_field


@dataclass(frozen=True)
class PolishConfig:
    iterations: int = 2
    shading_floor: float = 1e-4
    color_floor: float = 1e-4

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def polish_update(image: np.ndarray, eff_albedo: np.ndarray, shading: np.ndarray,
                  shading_floor: float = 1e-4):
    """Minimal-norm ``(ds, dat)`` for ``(3, ...)`` image/effective albedo and ``(1, ...)`` shading.

    Where ``s < shading_floor`` only the shading moves (``dat = 0``).
    """
    r = image - eff_albedo * shading
    ds = (r * eff_albedo).sum(0, keepdims=True) / ((eff_albedo ** 2).sum(0, keepdims=True) + shading ** 2)
    ok = shading >= shading_floor
    safe_s = np.where(ok, shading, 1.0)
    dat = np.where(ok, (r - eff_albedo * ds) / safe_s, 0.0)
    return ds, dat


def polish_step(image, dec: Decomposition, cfg: PolishConfig = PolishConfig()) -> Decomposition:
    image = as_field(image, 3)
    c = dec.color_field()
    at = dec.albedo * c
    ds, dat = polish_update(image, at, dec.shading, cfg.shading_floor)
    at = at + dat
    return Decomposition(at / np.maximum(c, cfg.color_floor), dec.shading + ds, dec.color)


def polish(image, dec: Decomposition, cfg: PolishConfig = PolishConfig()) -> Decomposition:
    """Iterate :func:`polish_step` and attach the final residual."""
    for _ in range(cfg.iterations):
        dec = polish_step(image, dec, cfg)
    return dec.with_residual(image)
