"""Named model variants: which paradigm, training setup and inference averaging each uses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .inference import AveragingConfig, inference_preset
from .paradigms import ParadigmConfig, paradigm_preset
from .training import TrainConfig


@dataclass(frozen=True)
class Variant:
    name: str
    paradigm: str = "default"
    train: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    decomposer: dict = field(default_factory=dict)
    inference: str = "Base"
    tiles: str = "paradigm"  # "paradigm" or "ingest" (external albedo/shading tiles)


_EMA_MASKED = {"ema_decay": 0.9, "ma01np_masking": True}

VARIANTS = {v.name: v for v in [
    Variant("Base"),
    Variant("Ma01NP", train=_EMA_MASKED, inference="Ma01NP"),
    Variant("BBA", train=_EMA_MASKED, inference="BBA"),
    Variant("BBAP", train=_EMA_MASKED, inference="BBAP"),
    Variant("BBAF", train=_EMA_MASKED, inference="BBAF"),
    Variant("BBAT", train=_EMA_MASKED, inference="BBAT"),
    Variant("NP", train=_EMA_MASKED, decomposer={"use_location_code": False}, inference="NP"),
    Variant("NoSmo", train=_EMA_MASKED, weights={"adversarial": 0.0}),
    Variant("NoInt", train=_EMA_MASKED, weights={"albedo": 0.0, "shading": 0.0}),
    Variant("NoRes", train=_EMA_MASKED, weights={"real_render": 0.0}),
    Variant("SD", train={**_EMA_MASKED, "disc_preset": "R10"}, inference="BBAF"),
    Variant("ID", train={**_EMA_MASKED, "disc_preset": "R29"}, inference="BBAF"),
    Variant("MD", train={**_EMA_MASKED, "disc_preset": "R48"}, inference="BBAF"),
    Variant("BD", train={**_EMA_MASKED, "disc_preset": "R128"}, inference="BBAF"),
    Variant("Dark", paradigm="Dark", train=_EMA_MASKED),
    Variant("AlbFrag", paradigm="AlbFrag", train=_EMA_MASKED),
    Variant("ShaFrag", paradigm="ShaFrag", train=_EMA_MASKED),
    Variant("CGI", train=_EMA_MASKED, tiles="ingest"),
    Variant("CGIT", train=_EMA_MASKED, tiles="ingest"),
    Variant("CGITD", train={**_EMA_MASKED, "paired_dictionaries": True}, tiles="ingest"),
]}


def variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}") from None


def train_config(name: str, base: Optional[TrainConfig] = None, **overrides) -> TrainConfig:
    """Training setup of variant ``name`` layered over ``base`` (defaults if omitted)."""
    v = variant(name)
    base = base or TrainConfig()
    cfg = replace(base, **v.train,
                  weights=replace(base.weights, **v.weights),
                  decomposer=replace(base.decomposer, **v.decomposer))
    return replace(cfg, **overrides) if overrides else cfg


def paradigm_config(name: str, **overrides) -> ParadigmConfig:
    return paradigm_preset(variant(name).paradigm, **overrides)


def averaging_config(name: str, **overrides) -> AveragingConfig:
    v = variant(name)
    return inference_preset(v.inference, **overrides)

