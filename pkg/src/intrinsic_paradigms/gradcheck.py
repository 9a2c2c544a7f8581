"""Finite-difference checks of autograd gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch


def _evaluate(f, param: torch.Tensor, index: int, h: float) -> tuple[float, float, float]:
    """``f`` at ``p - h e_i``, ``p`` and ``p + h e_i``."""
    flat = param.data.view(-1)
    old = flat[index].item()
    with torch.no_grad():
        centre = f().item()
        flat[index] = old + h
        up = f().item()
        flat[index] = old - h
        down = f().item()
        flat[index] = old
    return down, centre, up


def finite_difference(f: Callable[[], torch.Tensor], param: torch.Tensor, index: int, h: float = 1e-5) -> float:
    """``(f(p + h e_i) - f(p - h e_i)) / 2h`` for flat index ``index`` of ``param``."""
    down, _, up = _evaluate(f, param, index, h)
    return (up - down) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class GradReport(NamedTuple):
    worst: float  # largest relative error over the probed entries
    checked: int
    kinks: int  # entries settled by a one-sided slope because the stencil straddled a kink


def gradient_report(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5,
                    per_param: Optional[int] = 8, rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-6, kink_tol: float = 1e-6) -> GradReport:
    """Compare autograd against central differences entry by entry.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    (double precision recommended).  At most ``per_param`` random entries of
    each tensor are probed; ``None`` probes every entry.

    Piecewise-linear ops (leaky ReLU, hinges) are not differentiable at their
    kinks, and a central difference whose stencil straddles one is no
    reference.  Such entries are recognised by left and right slopes that
    disagree by more than ``kink_tol`` (relative); there the analytic value
    may match either one-sided slope instead.  Smooth entries with strong
    curvature can also trip the test, but the central error still applies.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    grads = torch.autograd.grad(f(), params, allow_unused=True)
    worst, checked, kinks = 0.0, 0, 0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        n = p.numel()
        idx = range(n) if per_param is None or per_param >= n else rng.choice(n, per_param, replace=False)
        for i in idx:
            analytic = g.reshape(-1)[int(i)].item()
            down, centre, up = _evaluate(f, p, int(i), h)
            left, right = (centre - down) / h, (up - centre) / h
            err = relative_error(analytic, (up - down) / (2 * h), floor)
            if relative_error(left, right, floor) > kink_tol:
                one_sided = min(relative_error(analytic, left, floor), relative_error(analytic, right, floor))
                kinks += one_sided < 0.1 * err
                err = min(err, one_sided)
            worst = max(worst, err)
            checked += 1
    return GradReport(worst, checked, kinks)


def max_relative_error(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5,
                       per_param: Optional[int] = 8, rng: Optional[np.random.Generator] = None,
                       floor: float = 1e-6) -> float:
    """Worst relative error of :func:`gradient_report`."""
    return gradient_report(f, params, h, per_param, rng, floor).worst
