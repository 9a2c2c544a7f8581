"""Training losses on torch tensors.

Fields are batched ``(N, C, H, W)``; colors are ``(N, 3)``.  Every loss is
a batch mean of per-example terms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    albedo: float = 1.0  # alpha_a
    shading: float = 1.0  # alpha_s
    color: float = 1.0  # alpha_c
    render: float = 1.0  # alpha_r
    real_render: float = 1.0  # alpha_rr
    real_color: float = 1.0  # alpha_rc
    adversarial: float = 1.0  # alpha_d

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


def mixed_per_example(u: torch.Tensor, v: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean mixed L1/L2 (smooth L1) penalty per example."""
    if u.shape != v.shape:
        raise ValueError(f"cannot compare {tuple(u.shape)} with {tuple(v.shape)}")
    return F.smooth_l1_loss(u, v, reduction="none", beta=beta).flatten(1).mean(1)


def sq_per_example(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance per example (no root)."""
    if u.shape != v.shape:
        raise ValueError(f"cannot compare {tuple(u.shape)} with {tuple(v.shape)}")
    return ((u - v) ** 2).flatten(1).sum(1)


def render(albedo, shading, color):
    return albedo * shading * color[:, :, None, None]


def range_per_example(x: torch.Tensor) -> torch.Tensor:
    """Summed squared excursion outside ``[0, 1]`` per example."""
    return (F.relu(x - 1.0) ** 2 + F.relu(-x) ** 2).flatten(1).sum(1)


def loss_synthetic(pred, target, weights: LossWeights, mask: Optional[torch.Tensor] = None,
                   beta: float = 1.0):
    """Supervised loss on paradigm examples.

    ``pred`` is ``(albedo, shading, color)``; ``target`` a mapping with
    ``albedo``, ``shading``, ``color`` and ``image``.  ``mask`` is an
    ``(N,)`` tensor: 1 keeps the albedo term and drops the shading term for
    that example, 0 the reverse; ``None`` keeps both.
    Returns ``(total, components)``.
    """
    a_hat, s_hat, c_hat = pred
    la = mixed_per_example(a_hat, target["albedo"], beta)
    ls = mixed_per_example(s_hat, target["shading"], beta)
    if mask is not None:
        mask = mask.to(la.dtype)
        la = la * mask
        ls = ls * (1.0 - mask)
    lc = sq_per_example(c_hat, target["color"])
    lr = mixed_per_example(render(a_hat, s_hat, c_hat), target["image"], beta)
    comps = {"L_a": la.mean(), "L_s": ls.mean(), "L_c": lc.mean(), "L_r": lr.mean()}
    total = (weights.albedo * comps["L_a"] + weights.shading * comps["L_s"]
             + weights.color * comps["L_c"] + weights.render * comps["L_r"])
    return total, comps


def loss_real(pred, image, weights: LossWeights, beta: float = 1.0):
    """Unsupervised loss on real tiles: reconstruction, gray-illuminant prior, range."""
    a_hat, s_hat, c_hat = pred
    lrr = mixed_per_example(render(a_hat, s_hat, c_hat), image, beta)
    lrc = sq_per_example(c_hat, torch.ones_like(c_hat))
    lrange = range_per_example(a_hat) + range_per_example(s_hat)
    comps = {"L_rr": lrr.mean(), "L_rc": lrc.mean(), "L_range": lrange.mean()}
    total = weights.real_render * comps["L_rr"] + weights.real_color * comps["L_rc"] + comps["L_range"]
    return total, comps
