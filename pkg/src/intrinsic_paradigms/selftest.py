"""Quick invariant checks runnable from a fresh install."""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np
import torch

from .decomposer import Decomposer, DecomposerConfig, TileDecomposer
from .fields import D4, apply_d4
from .inference import AveragingConfig, decompose_image, weight_window
from .losses import LossWeights, loss_real, loss_synthetic
from .polish import polish_update
from .whdr import JudgementSet, PredictionRule, oracle_threshold, whdr


def check_polish(rng) -> float:
    at = rng.uniform(0, 2, (3, 10_000))
    s = rng.uniform(1e-3, 2, (1, 10_000))
    image = rng.uniform(0, 2, (3, 10_000))
    ds, dat = polish_update(image, at, s)
    return float(np.abs(at * ds + s * dat - (image - at * s)).max())


def check_window(_rng) -> float:
    w = weight_window(128)
    worst = max(abs(w.max() - 1.0), float(w.min() <= 0))
    for g in D4:
        worst = max(worst, float(np.abs(apply_d4(w, g) - w).max()))
    return worst


def _random_set(rng, n_points=6, n_cmp=8):
    pts = [{"id": i, "x": float(rng.random()), "y": float(rng.random())} for i in range(n_points)]
    cmps = [{"point1": int(rng.integers(n_points)), "point2": int(rng.integers(n_points)),
             "darker": str(rng.choice(["1", "2", "E"])), "darker_score": float(rng.uniform(0.1, 1))}
            for _ in range(n_cmp)]
    return JudgementSet.from_records(pts, cmps), np.round(rng.random(n_points), 2)


def check_whdr(rng) -> float:
    worst = 0.0
    for _ in range(50):
        js, table = _random_set(rng)
        tau, best = oracle_threshold(js, table)
        for fixed in (0.1, 0.165):
            worst = max(worst, best - whdr(js, table, PredictionRule(tau=fixed)))
        num = den = 0.0
        for i, j, lab, w in zip(js.first, js.second, js.labels, js.weights):
            d = table[i] - table[j]
            pred = "2" if d > 0.1 else "1" if d < -0.1 else "E"
            num += w * (pred != lab)
            den += w
        worst = max(worst, abs(num / den - whdr(js, table)))
    return worst


def check_gradients(rng) -> float:
    from .gradcheck import max_relative_error

    torch.manual_seed(int(rng.integers(1 << 31)))
    model = Decomposer(DecomposerConfig(tile=32, width=2)).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    target = {"albedo": torch.rand(2, 3, 32, 32, dtype=torch.float64),
              "shading": torch.rand(2, 1, 32, 32, dtype=torch.float64),
              "color": torch.rand(2, 3, dtype=torch.float64), "image": x}

    def f():
        pred = model(x)
        return loss_synthetic(pred, target, LossWeights())[0] + loss_real(pred, x, LossWeights())[0]

    return max_relative_error(f, list(model.parameters()), per_param=3, rng=rng)


def check_equivariance(rng) -> float:
    torch.manual_seed(int(rng.integers(1 << 31)))
    model = TileDecomposer(Decomposer(DecomposerConfig(tile=32, width=2)))
    image = rng.random((3, 48, 48))
    cfg = AveragingConfig(n_tiles=2, n_scales=1, orbit_mode="discrete_image", seed_mode="content")
    base = decompose_image(model, image, cfg)
    worst = 0.0
    for g in D4:
        moved = decompose_image(model, apply_d4(image, g), cfg)
        worst = max(worst, float(np.abs(moved.albedo - apply_d4(base.albedo, g)).max()))
    return worst


CHECKS: list[tuple[str, Callable, float, bool]] = [
    ("polish identity", check_polish, 1e-9, False),
    ("window normalisation and symmetry", check_window, 1e-12, False),
    ("whdr vs naive and oracle dominance", check_whdr, 0.0, False),
    ("loss gradients vs finite differences", check_gradients, 1e-4, True),
    ("discrete image averaging equivariance", check_equivariance, 1e-5, False),
]


def run(quick: bool = False, seed: int = 0, checkpoint: Optional[str] = None, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    out(f"{'check':42s} {'value':>12s} {'limit':>10s}  result")
    rows = list(CHECKS)
    if checkpoint is not None:
        def check_checkpoint(_rng, path=checkpoint):
            from .training import load_decomposer
            load_decomposer(path)
            return 0.0
        rows.append(("checkpoint loads", check_checkpoint, 0.0, False))
    for name, fn, limit, slow in rows:
        if slow and quick:
            out(f"{name:42s} {'-':>12s} {limit:>10.0e}  skipped")
            continue
        t0 = time.perf_counter()
        try:
            value = fn(rng)
            passed = value <= limit
            shown = f"{value:12.3e}"
        except Exception as exc:  # report and keep going
            passed, shown = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        out(f"{name:42s} {shown:>12s} {limit:>10.0e}  {'pass' if passed else 'FAIL'} "
            f"({time.perf_counter() - t0:.1f}s)")
    return ok

