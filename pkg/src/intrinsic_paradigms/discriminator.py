"""Patch-scale adversary over (albedo, shading) pairs.

The network is a stack of spectrally normalised convolutions whose output
is a ``k x k`` score map; each score depends only on one receptive-field
patch, so averaging a hinge over the map averages it over all overlapping
patches of that size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerSpec(NamedTuple):
    kernel: int
    stride: int
    padding: int
    width: int


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: tuple[LayerSpec, ...]
    pairing: str = "joint"  # "joint": one net on 4 stacked channels; "independent": one net per field
    slope: float = 0.2
    convention: str = "unified"

    def __post_init__(self):
        if not self.layers or self.layers[-1].width != 1:
            raise ValueError("the last layer must produce one channel")
        if self.pairing not in ("joint", "independent"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        _convention(self.convention)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.layers)

    def map_size(self, n: int) -> int:
        for k, s, p, _ in self.layers:
            n = (n + 2 * p - k) // s + 1
        return n


def receptive_field(layers: Sequence) -> int:
    rf, jump = 1, 1
    for spec in layers:
        k, s = spec[0], spec[1]
        rf += (k - 1) * jump
        jump *= s
    return rf


def total_stride(layers: Sequence) -> int:
    return int(np.prod([spec[1] for spec in layers]))


def load_presets() -> dict:
    text = resources.files(__package__).joinpath("data/discriminator_presets.json").read_text()
    raw = json.loads(text)
    out = {}
    for name, entry in raw.items():
        if name.startswith("_"):
            continue
        layers = tuple(LayerSpec(*l) for l in entry["layers"])
        if receptive_field(layers) != entry["rf"]:
            raise ValueError(f"preset {name}: stated rf {entry['rf']} != {receptive_field(layers)}")
        out[name] = layers
    return out


PRESETS = load_presets()
# model variant names to presets
VARIANT_PRESETS = {"SD": "R10", "BBAF": "R22", "ID": "R29", "MD": "R48", "BD": "R128"}


def preset(name: str, **kw) -> DiscriminatorConfig:
    name = VARIANT_PRESETS.get(name, name)
    return DiscriminatorConfig(PRESETS[name], **kw)


# --- spectral normalisation --------------------------------------------------------------


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1, eps: float = 1e-12):
    """Power-iteration estimate of the top singular value of ``weight`` (as an
    ``out x rest`` matrix).  Returns ``(weight / sigma, u, v, sigma)``; ``u``
    and ``v`` carry no gradient, ``sigma`` does."""
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = None
        for _ in range(max(n_iter, 1)):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v)
    # a zero kernel stays zero instead of turning into 0 / 0
    return weight / sigma.clamp_min(eps), u, v, sigma


class SNConv2d(nn.Module):
    """Convolution whose kernel is divided by its estimated spectral norm.

    One power-iteration step is taken per forward pass in training mode;
    in eval mode the stored singular vectors are reused.
    """

    def __init__(self, in_ch, out_ch, kernel, stride, padding, generator=None):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding)
        g = generator if generator is not None else torch.default_generator
        u = F.normalize(torch.randn(out_ch, generator=g), dim=0)
        # one power step from the initial kernel, so the eval-mode estimate is positive before any training
        _, u, v, _ = spectral_normalize(self.conv.weight.detach(), u)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    def normalized_weight(self):
        w = self.conv.weight
        if self.training:
            w_sn, u, v, _ = spectral_normalize(w, self.u.to(w.dtype))
            with torch.no_grad():
                self.u.copy_(u)
                self.v.copy_(v)
            return w_sn
        mat = w.reshape(w.shape[0], -1)
        sigma = torch.dot(self.u.to(w.dtype), mat @ self.v.to(w.dtype))
        return w / sigma.clamp_min(1e-12)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.conv.bias, self.conv.stride, self.conv.padding)


class PatchNet(nn.Module):
    def __init__(self, in_ch: int, layers: Sequence[LayerSpec], slope: float = 0.2):
        super().__init__()
        convs = []
        c = in_ch
        for spec in layers:
            convs.append(SNConv2d(c, spec.width, spec.kernel, spec.stride, spec.padding))
            c = spec.width
        self.convs = nn.ModuleList(convs)
        self.slope = slope

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, self.slope)
        return x


class PairDiscriminator(nn.Module):
    """Scores (albedo, shading) pairs; returns ``(N, 1, k, k)`` (joint) or ``(N, 2, k, k)`` maps."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.pairing == "joint":
            self.nets = nn.ModuleList([PatchNet(4, cfg.layers, cfg.slope)])
        else:
            self.nets = nn.ModuleList([PatchNet(3, cfg.layers, cfg.slope), PatchNet(1, cfg.layers, cfg.slope)])

    def score_map(self, pair: torch.Tensor) -> torch.Tensor:
        """Score a stacked ``(N, 4, H, W)`` pair."""
        if pair.ndim != 4 or pair.shape[1] != 4:
            raise ValueError(f"expected (N, 4, H, W) albedo/shading pairs, got {tuple(pair.shape)}")
        if self.cfg.pairing == "joint":
            return self.nets[0](pair)
        return torch.cat([self.nets[0](pair[:, :3]), self.nets[1](pair[:, 3:])], 1)

    def forward(self, albedo: torch.Tensor, shading: torch.Tensor) -> torch.Tensor:
        return self.score_map(torch.cat([albedo, shading], 1))


# --- hinge losses -------------------------------------------------------------------------

# "unified": paradigm pairs pushed to >= +1, decomposed-real pairs to <= -1, and the
# generator pulls its pairs toward +1 with a hinge.  "flipped" swaps the sides and
# trains the generator on the raw mean score.
_CONVENTIONS = ("unified", "flipped")


def _convention(name: str) -> str:
    if name not in _CONVENTIONS:
        raise ValueError(f"unknown hinge convention {name!r}")
    return name


def disc_loss(f_paradigm: torch.Tensor, f_generated: torch.Tensor, convention: str = "unified"):
    """Mean hinge over every cell of both score-map batches."""
    if _convention(convention) == "unified":
        terms = (F.relu(1.0 - f_paradigm), F.relu(1.0 + f_generated))
    else:
        terms = (F.relu(1.0 + f_paradigm), F.relu(1.0 - f_generated))
    return torch.cat([t.reshape(-1) for t in terms]).mean()


def gen_adv_loss(f_generated: torch.Tensor, convention: str = "unified"):
    if _convention(convention) == "unified":
        return F.relu(1.0 - f_generated).mean()
    return f_generated.mean()


# --- footprint probe ------------------------------------------------------------------------


def probe_footprint(net: nn.Module, in_ch: int, size: int, cell=None) -> tuple[int, int]:
    """Height and width of the input region that influences one score cell.

    Measured from the exact support of the gradient of that cell, in
    double precision; ``cell`` defaults to the centre of the map.
    """
    net = net.double().eval()
    x = torch.randn(1, in_ch, size, size, dtype=torch.float64, requires_grad=True)
    out = net(x)
    k = out.shape[-1]
    i, j = cell if cell is not None else (k // 2, k // 2)
    (grad,) = torch.autograd.grad(out[0, 0, i, j], x)
    support = grad[0].abs().sum(0) > 0
    rows = torch.nonzero(support.any(1)).flatten()
    cols = torch.nonzero(support.any(0)).flatten()
    if min(rows[0], cols[0]) == 0 or max(rows[-1], cols[-1]) == size - 1:
        raise ValueError("probe cell footprint touches the input border; use a larger input")
    return int(rows[-1] - rows[0]) + 1, int(cols[-1] - cols[0]) + 1
