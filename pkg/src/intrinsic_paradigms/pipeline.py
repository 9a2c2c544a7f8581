"""Glue used by the command line: dictionaries, toy data and decomposition bundles."""

from __future__ import annotations

import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .decomposer import Decomposer, TileDecomposer, average_checkpoints
from .dictionaries import TileDictionary, build_dictionary
from .fields import Decomposition
from .inference import AveragingConfig, decompose_image
from .io import read_iikf, read_json, read_png, write_iikf, write_json, write_png
from .paradigms import ParadigmConfig, ParadigmSampler, build_color_pool, make_rng
from .whdr import JudgementSet, load_judgement_dir

IMAGE_SUFFIXES = (".png", ".iikf")


def load_images(path) -> dict:
    """``{stem: (3, H, W) field}`` for every png/iikf image in a directory (or a single file)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.iterdir() if p.suffix in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {path}")
    out = {}
    for f in files:
        im = read_iikf(f).astype(np.float64) if f.suffix == ".iikf" else read_png(f)
        if im.shape[0] == 1:
            im = np.repeat(im, 3, axis=0)
        out[f.stem] = im
    return out


def toy_root() -> Path:
    return Path(str(resources.files(__package__).joinpath("data/toy")))


def load_toy() -> tuple[dict, dict, dict]:
    """Bundled toy images, their judgements and the train/test split."""
    root = toy_root()
    return load_images(root / "images"), load_judgement_dir(root / "judgements"), read_json(root / "split.json")


def paradigm_dictionaries(cfg: ParadigmConfig, images: Sequence, size: int, seed: int,
                          pool_samples: int = 10_000, entries_per_sigma: int = 200
                          ) -> tuple[TileDictionary, TileDictionary]:
    """Albedo and shading dictionaries drawn from the paradigm.

    Surface colors are sampled from ``images``.  Albedo entry ``i`` uses the
    generator keyed ``(seed, i)`` and shading entry ``i`` ``(seed + 1, i)``.
    """
    pool = build_color_pool(list(images), pool_samples, make_rng(seed, 1), clip=cfg.pool_clip)
    sampler = ParadigmSampler(pool, cfg, seed, entries_per_sigma=entries_per_sigma)
    meta = {"paradigm": asdict(cfg), "digest": cfg.digest()}
    albedo = build_dictionary(sampler.albedo, size, seed, "albedo", meta)
    shading = build_dictionary(sampler.shading, size, seed + 1, "shading", meta)
    return albedo, shading


def load_model(checkpoints: Sequence, use_ema: bool = True, dtype=torch.float32) -> Decomposer:
    """Decomposer from one checkpoint, or the parameter mean of several."""
    from .training import load_decomposer

    models = [load_decomposer(c, use_ema, dtype) for c in checkpoints]
    if not models:
        raise ValueError("need at least one checkpoint")
    if len(models) > 1:
        models[0].load_state_dict(average_checkpoints([m.state_dict() for m in models]))
    return models[0]


def save_decomposition(out_dir, dec: Decomposition, sidecar: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_iikf(out / "albedo.iikf", dec.albedo)
    write_iikf(out / "shading.iikf", dec.shading)
    write_iikf(out / "color.iikf", dec.color_field())
    write_iikf(out / "residual.iikf", dec.residual)
    write_png(out / "albedo.png", np.clip(dec.albedo, 0, 1))
    write_png(out / "shading.png", np.clip(dec.shading, 0, 1))
    write_png(out / "residual.png", np.clip(0.5 + dec.residual, 0, 1))
    write_json(out / "sidecar.json", sidecar)
    return out


def load_decomposition(path) -> Decomposition:
    path = Path(path)
    res = path / "residual.iikf"
    return Decomposition(read_iikf(path / "albedo.iikf").astype(np.float64),
                         read_iikf(path / "shading.iikf").astype(np.float64),
                         read_iikf(path / "color.iikf").astype(np.float64),
                         read_iikf(res).astype(np.float64) if res.is_file() else None)


def decompose_images(model: Decomposer, images: dict, cfg: AveragingConfig, out_dir=None,
                     run_config: Optional[dict] = None) -> dict:
    """Decompose every image; optionally write one output bundle per image."""
    tile_model = TileDecomposer(model)
    out = {}
    for name, image in images.items():
        t0 = time.perf_counter()
        dec = decompose_image(tile_model, image, cfg)
        elapsed = time.perf_counter() - t0
        out[name] = dec
        if out_dir is not None:
            save_decomposition(Path(out_dir) / name, dec, {
                "run_config": run_config or {}, "averaging": asdict(cfg), "seed": cfg.seed,
                "image": name, "seconds": elapsed})
    return out


def judgements_for(judgements: dict, ids) -> dict:
    missing = [i for i in ids if i not in judgements]
    if missing:
        raise FileNotFoundError(f"no judgements for {missing}")
    return {i: judgements[i] for i in ids}


__all__ = ["JudgementSet", "load_images", "load_toy", "paradigm_dictionaries", "load_model",
           "save_decomposition", "load_decomposition", "decompose_images", "judgements_for", "toy_root"]
