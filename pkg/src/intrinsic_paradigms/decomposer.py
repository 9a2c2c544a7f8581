"""Fully convolutional tile decomposer: RGB tile -> albedo, shading, illuminant color."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DecomposerConfig:
    tile: int = 128
    width: int = 32
    use_location_code: bool = True
    code_reach: int = 40
    slope: float = 0.2

    @property
    def widths(self) -> tuple[int, ...]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w, 8 * w, 8 * w)

    def to_dict(self) -> dict:
        return asdict(self)


def location_code(tile: int = 128, reach: int = 40) -> np.ndarray:
    """``(4, T, T)`` code: ``max(0, reach - distance)`` to the left, right, top and bottom edges.

    Boundary pixels are at distance 0.
    """
    if tile < 1:
        raise ValueError("tile must be positive")
    idx = np.arange(tile, dtype=np.float64)
    cols = np.broadcast_to(idx[None, :], (tile, tile))
    rows = np.broadcast_to(idx[:, None], (tile, tile))
    dists = (cols, tile - 1 - cols, rows, tile - 1 - rows)
    return np.stack([np.maximum(0.0, reach - d) for d in dists])


class Decomposer(nn.Module):
    """U-net with skip connections.

    A 1x1 lift is followed by five stride-2 convolutions (k4, pad 1) that
    halve the tile each time.  Each of five decoder stages concatenates the
    matching encoder block, applies a k5 convolution and upsamples by 2.
    Albedo and shading heads are 1x1 convolutions over the decoder output
    and the full-resolution lift features, squashed into ``[0, 1]``; the
    color head is the exponential of an affine map of the pooled bottleneck.
    """

    def __init__(self, cfg: DecomposerConfig = DecomposerConfig()):
        super().__init__()
        if cfg.tile % 32:
            raise ValueError("tile size must be a multiple of 32")
        self.cfg = cfg
        ws = cfg.widths
        in_ch = 7 if cfg.use_location_code else 3
        self.lift = nn.Conv2d(in_ch, ws[0], 1)
        self.encoder = nn.ModuleList(nn.Conv2d(ws[i], ws[i + 1], 4, 2, 1) for i in range(5))
        # stage i sees the running code (ws[5-i] channels) stacked with encoder block 5-i
        self.decoder = nn.ModuleList(nn.Conv2d(2 * ws[5 - i], ws[4 - i], 5, 1, 2) for i in range(5))
        self.albedo_head = nn.Conv2d(2 * ws[0], 3, 1)
        self.shading_head = nn.Conv2d(2 * ws[0], 1, 1)
        self.color_head = nn.Linear(ws[5], 3)
        code = torch.from_numpy(location_code(cfg.tile, cfg.code_reach) / cfg.code_reach)
        self.register_buffer("code", code.float(), persistent=False)

    @property
    def tile_size(self) -> int:
        return self.cfg.tile

    def forward(self, x: torch.Tensor):
        n, c, h, w = x.shape
        if c != 3 or h != self.cfg.tile or w != self.cfg.tile:
            raise ValueError(f"expected (N, 3, {self.cfg.tile}, {self.cfg.tile}) tiles, got {tuple(x.shape)}")
        if self.cfg.use_location_code:
            x = torch.cat([x, self.code.to(x.dtype).expand(n, -1, -1, -1)], 1)
        slope = self.cfg.slope
        lifted = self.lift(x)
        feats = [lifted]
        h_ = lifted
        for conv in self.encoder:
            h_ = F.leaky_relu(conv(h_), slope)
            feats.append(h_)
        for i, conv in enumerate(self.decoder):
            h_ = F.leaky_relu(conv(torch.cat([h_, feats[5 - i]], 1)), slope)
            h_ = F.interpolate(h_, scale_factor=2, mode="bilinear", align_corners=False)
        top = torch.cat([h_, lifted], 1)
        albedo = 0.5 * (torch.tanh(self.albedo_head(top)) + 1.0)
        shading = 0.5 * (torch.tanh(self.shading_head(top)) + 1.0)
        color = torch.exp(self.color_head(feats[5].mean(dim=(2, 3))))
        return albedo, shading, color


def zero_parameters(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TileDecomposer:
    """Numpy front end to a :class:`Decomposer` for inference.

    Calling it on ``(N, 3, T, T)`` tiles returns float64 ``(albedo, shading, color)``.
    """

    def __init__(self, model: Decomposer, batch_size: int = 32):
        self.model = model.eval()
        self.batch_size = batch_size
        self.dtype = next(model.parameters()).dtype

    @property
    def tile_size(self) -> int:
        return self.model.tile_size

    @property
    def use_location_code(self) -> bool:
        return self.model.cfg.use_location_code

    def __call__(self, tiles: np.ndarray):
        outs = ([], [], [])
        with torch.no_grad():
            for i in range(0, len(tiles), self.batch_size):
                x = torch.from_numpy(np.ascontiguousarray(tiles[i:i + self.batch_size])).to(self.dtype)
                for acc, t in zip(outs, self.model(x)):
                    acc.append(t.double().numpy())
        albedo, shading, color = (np.concatenate(o) for o in outs)
        if not (np.all(np.isfinite(albedo)) and np.all(np.isfinite(shading)) and np.all(np.isfinite(color))):
            raise FloatingPointError("decomposer produced non-finite activations")
        return albedo, shading, color


def decompose_tile(model: Decomposer, tile: np.ndarray):
    """Decompose one ``(3, T, T)`` tile; returns ``(albedo, shading, color)`` arrays."""
    tile = np.asarray(tile, dtype=np.float64)
    if tile.shape != (3, model.tile_size, model.tile_size):
        raise ValueError(f"tile must be (3, {model.tile_size}, {model.tile_size}), got {tile.shape}")
    a, s, c = TileDecomposer(model)(tile[None])
    return a[0], s[0], c[0]


# --- parameter averaging -------------------------------------------------------------


@dataclass
class EmaState:
    """Shadow copy ``psi`` of the parameters, refreshed as ``psi <- w psi + (1 - w) theta``
    each time the number of images seen crosses a multiple of ``interval``."""

    shadow: dict
    decay: float = 0.9
    interval: int = 5000
    boundary: int = 0

    @classmethod
    def from_params(cls, params: Mapping, decay: float = 0.9, interval: int = 5000) -> "EmaState":
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        return cls({k: _clone(v) for k, v in params.items()}, decay, interval)


def _clone(v):
    return v.detach().clone() if isinstance(v, torch.Tensor) else np.array(v, dtype=np.float64, copy=True)


def _params_of(obj) -> Mapping:
    return obj.state_dict() if isinstance(obj, nn.Module) else obj


def ema_update(ema: EmaState, live, images_seen: int) -> EmaState:
    params = _params_of(live)
    if params.keys() != ema.shadow.keys():
        raise ValueError("EMA shadow and live parameters have different blocks")
    crossed = images_seen // ema.interval - ema.boundary
    if crossed <= 0:
        return ema
    w = ema.decay
    for _ in range(crossed):
        for k, theta in params.items():
            psi = ema.shadow[k]
            if tuple(np.shape(psi)) != tuple(np.shape(theta)):
                raise ValueError(f"shape mismatch for {k}: {np.shape(psi)} vs {np.shape(theta)}")
            if isinstance(psi, torch.Tensor):
                ema.shadow[k] = w * psi + (1.0 - w) * theta.detach().to(psi.dtype)
            else:
                ema.shadow[k] = w * psi + (1.0 - w) * np.asarray(theta, dtype=np.float64)
    ema.boundary += crossed
    return ema


def average_checkpoints(param_sets: Sequence[Mapping]) -> dict:
    """Blockwise arithmetic mean of congruent parameter sets."""
    if not param_sets:
        raise ValueError("need at least one checkpoint")
    keys = param_sets[0].keys()
    out = {}
    for k in keys:
        vals = []
        for p in param_sets:
            if p.keys() != keys:
                raise ValueError("checkpoints have different parameter blocks")
            vals.append(p[k])
        shapes = {tuple(np.shape(v)) for v in vals}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch for {k}: {shapes}")
        if isinstance(vals[0], torch.Tensor):
            out[k] = torch.stack([v.to(torch.float64) for v in vals]).mean(0).to(vals[0].dtype)
        else:
            out[k] = np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in vals]), axis=0)
    return out
