"""Simulated test sets and the boxplot summaries used to compare models on them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .fields import as_field
from .whdr import JudgementSet, PredictionRule, lightness_table, whdr


def quantile(sorted_values: np.ndarray, p: float) -> float:
    """Linear interpolation between order statistics at position ``(n - 1) p``."""
    x = np.asarray(sorted_values, dtype=np.float64)
    h = (len(x) - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, len(x) - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


@dataclass(frozen=True)
class BoxplotStats:
    median: float
    q25: float
    q75: float
    notch: float  # half-width of the notch around the median
    whisker_lo: float
    whisker_hi: float
    outliers: tuple
    n: int

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "BoxplotStats":
        x = np.sort(np.asarray(values, dtype=np.float64))
        if len(x) == 0:
            raise ValueError("no values to summarise")
        q25, med, q75 = (quantile(x, p) for p in (0.25, 0.5, 0.75))
        iqr = q75 - q25
        lo_fence, hi_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
        inside = x[(x >= lo_fence) & (x <= hi_fence)]
        outliers = tuple(float(v) for v in x if v < lo_fence or v > hi_fence)
        return cls(med, q25, q75, 1.57 * iqr / math.sqrt(len(x)),
                   float(inside.min()), float(inside.max()), outliers, len(x))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = list(self.outliers)
        return d


def simulated_test_sets(ids: Sequence, p: float = 0.2, n_sets: int = 50,
                        rng: np.random.Generator = None) -> list[list]:
    """Independent Bernoulli(p) subsets of ``ids``; an empty draw is redrawn."""
    ids = list(ids)
    if not ids:
        raise ValueError("no image ids")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    sets = []
    while len(sets) < n_sets:
        keep = rng.random(len(ids)) < p
        if keep.any():
            sets.append([i for i, k in zip(ids, keep) if k])
    return sets


def set_whdr(tables: Mapping, judgements: Mapping[object, JudgementSet], ids: Sequence,
             rule: PredictionRule) -> float:
    """Disagreement pooled over all comparisons of the images in ``ids``."""
    if not ids:
        raise ValueError("empty test set")
    return whdr([(judgements[i], tables[i]) for i in ids], rule=rule)


def bootstrap_whdr(tables: Mapping, judgements: Mapping, sets: Sequence[Sequence],
                   rule: PredictionRule) -> tuple[list[float], BoxplotStats]:
    """Per-set pooled disagreement for each simulated set, with its boxplot summary.

    ``tables`` maps image id to the lightness table of the predicted albedo.
    """
    values = [set_whdr(tables, judgements, s, rule) for s in sets]
    return values, BoxplotStats.from_values(values)


def treatment_effect(whdrs_a: Sequence[float], whdrs_b: Sequence[float]) -> tuple[list[float], BoxplotStats]:
    """Per-set differences ``A - B`` (negative means A reports the better ratio)."""
    if len(whdrs_a) != len(whdrs_b):
        raise ValueError("both models must be scored on the same sets in the same order")
    diffs = [float(a) - float(b) for a, b in zip(whdrs_a, whdrs_b)]
    return diffs, BoxplotStats.from_values(diffs)


def sample_std(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two values")
    return float(math.sqrt(((x - x.mean()) ** 2).sum() / (len(x) - 1)))


def averaging_variance(decompose: Callable[[np.ndarray, int], object], images: Mapping,
                       judgements: Mapping, rule: PredictionRule, repeats: int = 5,
                       base_seed: int = 0) -> tuple[float, list[float]]:
    """Spread of the pooled ratio caused by the random tile offsets alone.

    ``decompose(image, seed)`` returns a decomposition; each repeat uses a
    fresh layout seed.  Returns ``(sample std, per-repeat values)``.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    values = []
    ids = sorted(images)
    for r in range(repeats):
        tables = {}
        for i in ids:
            dec = decompose(as_field(images[i], 3), base_seed + r)
            tables[i] = lightness_table(dec.albedo, judgements[i])
        values.append(set_whdr(tables, judgements, ids, rule))
    return sample_std(values), values
