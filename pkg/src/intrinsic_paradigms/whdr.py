"""Weighted human disagreement ratio over point-pair lightness judgements.

Judgement files use the field names of the public lightness-judgement
dataset: ``intrinsic_points`` (``id``, ``x``, ``y`` normalised to [0, 1])
and ``intrinsic_comparisons`` (``point1``, ``point2``, ``darker`` in
``{"1", "2", "E"}``, ``darker_score``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fields import as_field

MODES = ("albedo", "log_albedo")
LOG_FLOOR = 1e-4
FIXED_THRESHOLDS = (0.1, 0.165)
LABELS = ("1", "2", "E")  # point1 darker, point2 darker, equal


@dataclass(frozen=True)
class PredictionRule:
    mode: str = "albedo"
    tau: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.tau > 0:
            raise ValueError("threshold must be > 0")


@dataclass(frozen=True)
class JudgementSet:
    """Points and weighted comparisons for one image; comparisons index into the point arrays."""

    point_ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_records(cls, points: Sequence[dict], comparisons: Sequence[dict]) -> "JudgementSet":
        ids = [p["id"] for p in points]
        index = {pid: i for i, pid in enumerate(ids)}
        x = np.array([float(p["x"]) for p in points], dtype=np.float64)
        y = np.array([float(p["y"]) for p in points], dtype=np.float64)
        if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
            raise ValueError("point coordinates must lie in [0, 1]")
        first, second, labels, weights = [], [], [], []
        for c in comparisons:
            if c.get("darker_score") is None or c.get("darker") is None:
                continue  # unrated comparison
            for key in ("point1", "point2"):
                if c[key] not in index:
                    raise ValueError(f"comparison references unknown point {c[key]!r}")
            label = str(c["darker"])
            if label not in LABELS:
                raise ValueError(f"unknown label {label!r}")
            first.append(index[c["point1"]])
            second.append(index[c["point2"]])
            labels.append(label)
            weights.append(float(c["darker_score"]))
        weights = np.array(weights, dtype=np.float64)
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("comparison weights must be finite and >= 0")
        return cls(np.array(ids, dtype=object), x, y, np.array(first, dtype=np.int64),
                   np.array(second, dtype=np.int64), np.array(labels, dtype="<U1"), weights)

    @classmethod
    def from_json(cls, obj: dict) -> "JudgementSet":
        points = obj.get("intrinsic_points", obj.get("points"))
        comparisons = obj.get("intrinsic_comparisons", obj.get("comparisons"))
        if points is None or comparisons is None:
            raise ValueError("judgement file needs intrinsic_points and intrinsic_comparisons")
        return cls.from_records(points, comparisons)

    @classmethod
    def load(cls, path) -> "JudgementSet":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return {
            "intrinsic_points": [{"id": pid, "x": float(x), "y": float(y)}
                                 for pid, x, y in zip(self.point_ids.tolist(), self.x, self.y)],
            "intrinsic_comparisons": [
                {"point1": self.point_ids[i], "point2": self.point_ids[j], "darker": lab, "darker_score": float(w)}
                for i, j, lab, w in zip(self.first, self.second, self.labels, self.weights)],
        }

    def __len__(self):
        return len(self.labels)


def lightness(albedo, x: float, y: float) -> float:
    """Channel mean of the bilinear sample at ``(x (W-1), y (H-1))``, border clamped."""
    return float(lightness_at(albedo, np.array([x]), np.array([y]))[0])


def lightness_at(albedo, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    f = as_field(albedo)
    _, h, w = f.shape
    gray = f.mean(0)
    px = np.clip(np.asarray(x, dtype=np.float64) * (w - 1), 0, w - 1)
    py = np.clip(np.asarray(y, dtype=np.float64) * (h - 1), 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx, ty = px - x0, py - y0
    top = gray[y0, x0] * (1 - tx) + gray[y0, x1] * tx
    bottom = gray[y1, x0] * (1 - tx) + gray[y1, x1] * tx
    return top * (1 - ty) + bottom * ty


def lightness_table(albedo, judgements: JudgementSet) -> np.ndarray:
    """Lightness at every point of ``judgements``, in point order."""
    return lightness_at(albedo, judgements.x, judgements.y)


def difference(l1, l2, mode: str = "albedo"):
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    if mode == "log_albedo":
        return np.log(np.maximum(l1, LOG_FLOOR)) - np.log(np.maximum(l2, LOG_FLOOR))
    if mode != "albedo":
        raise ValueError(f"mode must be one of {MODES}")
    return l1 - l2


def _labels_from_difference(d, tau):
    d = np.asarray(d)
    return np.where(d > tau, "2", np.where(d < -tau, "1", "E"))


def predict(l1, l2, rule: PredictionRule = PredictionRule()) -> str:
    """``"2"`` when point 1 is lighter by more than ``tau``, ``"1"`` for the reverse, else ``"E"``."""
    return str(_labels_from_difference(difference(l1, l2, rule.mode), rule.tau))


def _pool(items) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate ``(judgements, lightness table)`` pairs into (l1, l2, labels, weights)."""
    l1, l2, labels, weights = [], [], [], []
    for js, table in items:
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (len(js.x),):
            raise ValueError("lightness table must have one value per point")
        l1.append(table[js.first])
        l2.append(table[js.second])
        labels.append(js.labels)
        weights.append(js.weights)
    if not l1:
        raise ValueError("no judgements given")
    return np.concatenate(l1), np.concatenate(l2), np.concatenate(labels), np.concatenate(weights)


def _items(judgements, table):
    if isinstance(judgements, JudgementSet):
        return [(judgements, table)]
    return list(judgements) if table is None else list(zip(judgements, table))


def whdr(judgements, table=None, rule: PredictionRule = PredictionRule()) -> float:
    """Weighted fraction of comparisons whose predicted label disagrees.

    ``judgements`` is one :class:`JudgementSet` with its lightness table, or an
    iterable of ``(JudgementSet, table)`` pairs pooled over all comparisons.
    """
    l1, l2, labels, weights = _pool(_items(judgements, table))
    total = _running_sum(weights)
    if not total > 0:
        raise ValueError("judgements carry zero total weight")
    wrong = _labels_from_difference(difference(l1, l2, rule.mode), rule.tau) != labels
    return float(_running_sum(np.where(wrong, weights, 0.0)) / total)


def _running_sum(x: np.ndarray) -> float:
    # left-to-right accumulation, so the result does not depend on numpy's blocking
    return float(np.cumsum(x)[-1]) if len(x) else 0.0


def threshold_candidates(abs_d: np.ndarray) -> np.ndarray:
    """One threshold inside every interval on which the disagreement is constant."""
    b = np.unique(abs_d[abs_d > 0])
    if len(b) == 0:
        return np.array([1.0])
    return np.concatenate([[b[0] / 2], (b[:-1] + b[1:]) / 2, [1.5 * b[-1]]])


def oracle_threshold(judgements, table=None, mode: str = "albedo") -> tuple[float, float]:
    """Threshold minimising the pooled disagreement, with its value.

    The ratio is piecewise constant in the threshold, changing only at the
    absolute differences, so scanning one candidate per interval is exact.
    Ties go to the smaller threshold.
    """
    items = _items(judgements, table)
    l1, l2, labels, weights = _pool(items)
    if not weights.sum() > 0:
        raise ValueError("judgements carry zero total weight")
    d = difference(l1, l2, mode)
    abs_d = np.abs(d)
    cands = threshold_candidates(abs_d)
    # cost of each comparison when predicted equal vs predicted by sign
    cost_equal = weights * (labels != "E")
    sign_label = np.where(d > 0, "2", "1")
    cost_sign = weights * (labels != sign_label)
    order = np.argsort(abs_d, kind="stable")
    sorted_d = abs_d[order]
    cum_equal = np.concatenate([[0.0], np.cumsum(cost_equal[order])])
    cum_sign = np.concatenate([[0.0], np.cumsum(cost_sign[order])])
    k = np.searchsorted(sorted_d, cands, side="right")
    cost = cum_equal[k] + (cum_sign[-1] - cum_sign[k])
    best = cost.min()
    near = np.nonzero(cost <= best + 1e-12 * max(1.0, abs(best)))[0]
    # resolve rounding-level ties with the exact evaluator
    scores = [(whdr(items, rule=PredictionRule(mode, float(cands[i]))), float(cands[i])) for i in near]
    w_best = min(s for s, _ in scores)
    tau = min(t for s, t in scores if s == w_best)
    return tau, w_best


def heldout_threshold(judgements, table=None, mode: str = "albedo") -> float:
    """Threshold fitted on a training split, to be applied to a disjoint test split."""
    return oracle_threshold(judgements, table, mode)[0]


def threshold_report(test_items, train_items=None, mode: str = "albedo") -> dict:
    """Pooled disagreement under the fixed, held-out and oracle thresholds."""
    test_items = list(test_items)
    report = {}
    for tau in FIXED_THRESHOLDS:
        report[f"fixed_{tau:g}"] = {"tau": tau, "whdr": whdr(test_items, rule=PredictionRule(mode, tau))}
    if train_items:
        tau = heldout_threshold(list(train_items), mode=mode)
        report["heldout"] = {"tau": tau, "whdr": whdr(test_items, rule=PredictionRule(mode, tau))}
    tau, value = oracle_threshold(test_items, mode=mode)
    report["oracle"] = {"tau": tau, "whdr": value}
    return report


def load_judgement_dir(path) -> dict:
    """``{image id: JudgementSet}`` for every ``*.json`` judgement file in ``path``."""
    out = {}
    for f in sorted(Path(path).glob("*.json")):
        if f.name in ("split.json", "manifest.json"):
            continue
        out[f.stem] = JudgementSet.load(f)
    if not out:
        raise FileNotFoundError(f"no judgement files in {path}")
    return out


def iter_items(judgements: dict, tables: dict, ids: Iterable) -> list:
    return [(judgements[i], tables[i]) for i in ids]
