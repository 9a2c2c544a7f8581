"""Training loop: supervised paradigm steps, real-tile steps with adversarial smoothing.

Batches are assembled from generators keyed by ``(seed, step)``, so a run
resumed from a checkpoint replays exactly the batches it would have seen.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_bundle, prefixed, save_bundle, subset
from .decomposer import Decomposer, DecomposerConfig, EmaState, ema_update
from .dictionaries import TileDictionary
from .discriminator import PairDiscriminator, disc_loss, gen_adv_loss, preset
from .fields import as_field
from .losses import LossWeights, loss_real, loss_synthetic, render
from .paradigms import make_rng, sample_color

log = logging.getLogger(__name__)

_BATCH_STREAM = 7  # generator key component for batch assembly


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 128
    total_images: int = 200_000
    real_fraction: float = 0.5
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    huber_beta: float = 1.0
    ma01np_masking: bool = False
    ema_decay: Optional[float] = None
    ema_interval: int = 5000
    disc_preset: str = "R22"
    disc_pairing: str = "joint"
    disc_convention: str = "unified"
    disc_steps: int = 1
    freeze_discriminator: bool = False
    paired_dictionaries: bool = False
    color_clip: tuple[float, float] = (0.05, 2.0)
    checkpoint_every: int = 0
    seed: int = 0
    decomposer: DecomposerConfig = field(default_factory=DecomposerConfig)

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["decomposer"] = DecomposerConfig(**d.get("decomposer", {}))
        for key in ("betas", "color_clip"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sample_real_tiles(images: Sequence, rng: np.random.Generator, size: int = 4000,
                      tile: int = 128) -> TileDictionary:
    """Uniformly chosen image, uniformly placed in-bounds crop; small images are skipped."""
    usable = []
    for k, im in enumerate(images):
        f = as_field(im, 3)
        if f.shape[1] < tile or f.shape[2] < tile:
            warnings.warn(f"image {k} is {f.shape[1]}x{f.shape[2]}, smaller than the {tile}px tile; skipped")
            continue
        usable.append(f)
    if not usable:
        raise ValueError("no image is large enough to cut tiles from")
    out = np.empty((size, 3, tile, tile), dtype=np.float32)
    for i in range(size):
        f = usable[rng.integers(0, len(usable))]
        y = rng.integers(0, f.shape[1] - tile + 1)
        x = rng.integers(0, f.shape[2] - tile + 1)
        out[i] = f[:, y:y + tile, x:x + tile]
    return TileDictionary("real", out)


def _grads_finite(params) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


def _grad_norm(params) -> float:
    sq = sum(float((p.grad.double() ** 2).sum()) for p in params if p.grad is not None)
    return sq ** 0.5


def _guarded_step(opt: torch.optim.Optimizer, params, closure, what: str):
    """Backprop ``closure()`` and step; on a non-finite gradient halve the step size
    once and retry, and raise if it happens again."""
    for attempt in range(2):
        opt.zero_grad(set_to_none=True)
        loss, comps = closure()
        loss.backward()
        if _grads_finite(params):
            norm = _grad_norm(params)
            opt.step()
            return loss, comps, norm
        for group in opt.param_groups:
            group["lr"] *= 0.5
        log.warning("non-finite %s gradient; step size halved to %g", what, opt.param_groups[0]["lr"])
    opt.zero_grad(set_to_none=True)
    raise FloatingPointError(f"non-finite {what} gradient after step-size reduction")


def adversarial_step(model: Decomposer, disc: PairDiscriminator, opt_g, opt_d, cfg: TrainConfig,
                     real: Optional[torch.Tensor] = None, paradigm: Optional[dict] = None,
                     pairs: Optional[tuple] = None) -> dict:
    """One optimisation step.

    With a real batch and ``alpha_d > 0`` the discriminator first takes
    ``disc_steps`` steps separating ``pairs`` (paradigm albedo/shading) from
    decomposed real pairs.  The decomposer then steps on the paradigm loss
    (if ``paradigm`` is given) plus the real-tile loss and ``alpha_d`` times
    the adversarial loss through the updated, frozen discriminator.
    """
    w = cfg.weights
    record = {}
    adversarial = real is not None and w.adversarial > 0
    if adversarial and not cfg.freeze_discriminator:
        if pairs is None:
            raise ValueError("a real step needs paradigm pairs for the discriminator")
        disc.train()
        paradigm_pair = torch.cat(pairs, 1)
        with torch.no_grad():
            a_r, s_r, _ = model(real)
        generated_pair = torch.cat([a_r, s_r], 1)
        n = len(paradigm_pair)

        def d_closure():
            scores = disc.score_map(torch.cat([paradigm_pair, generated_pair]))
            loss = disc_loss(scores[:n], scores[n:], cfg.disc_convention)
            return loss, {"L_disc": loss}

        for _ in range(cfg.disc_steps):
            loss_d, _, record["grad_norm_disc"] = _guarded_step(opt_d, list(disc.parameters()), d_closure, "discriminator")
        record["L_disc"] = float(loss_d.detach())

    disc.eval()
    for p in disc.parameters():
        p.requires_grad_(False)

    def g_closure():
        total = 0.0
        comps = {}
        if paradigm is not None:
            pred = model(paradigm["image"])
            lt, c = loss_synthetic(pred, paradigm, w, paradigm.get("mask"), cfg.huber_beta)
            total = total + lt
            comps.update(c)
        if real is not None:
            pred = model(real)
            lr_, c = loss_real(pred, real, w, cfg.huber_beta)
            total = total + lr_
            comps.update(c)
            if adversarial:
                adv = gen_adv_loss(disc(pred[0], pred[1]), cfg.disc_convention)
                comps["L_adv"] = adv
                total = total + w.adversarial * adv
        return total, comps

    try:
        loss_g, comps, record["grad_norm"] = _guarded_step(opt_g, list(model.parameters()), g_closure, "decomposer")
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    record["loss"] = float(loss_g.detach())
    record.update({k: float(v.detach()) for k, v in comps.items()})
    return record


def paradigm_batch(rng: np.random.Generator, albedo: TileDictionary, shading: TileDictionary,
                   n: int, cfg: TrainConfig, dtype=torch.float32) -> dict:
    ia = albedo.draw_indices(rng, n)
    ishade = ia % len(shading) if cfg.paired_dictionaries else shading.draw_indices(rng, n)
    colors = np.stack([sample_color(rng, cfg.color_clip) for _ in range(n)])
    batch = {
        "albedo": torch.from_numpy(albedo.entries[ia]).to(dtype),
        "shading": torch.from_numpy(shading.entries[ishade]).to(dtype),
        "color": torch.from_numpy(colors).to(dtype),
    }
    batch["image"] = render(batch["albedo"], batch["shading"], batch["color"])
    if cfg.ma01np_masking:
        batch["mask"] = torch.from_numpy((rng.random(n) < 0.5).astype(np.float64)).to(dtype)
    return batch


class Trainer:
    """Owns the decomposer, discriminator, optimisers and parameter average for one run."""

    def __init__(self, cfg: TrainConfig, albedo: TileDictionary, shading: TileDictionary,
                 real: Optional[TileDictionary] = None, out_dir=None):
        if cfg.real_fraction > 0 and real is None:
            raise ValueError("real_fraction > 0 needs a dictionary of real tiles")
        for d in (albedo, shading, real):
            if d is not None and d.tile != cfg.decomposer.tile:
                raise ValueError(f"{d.kind} tiles are {d.tile}px, decomposer expects {cfg.decomposer.tile}")
        self.cfg = cfg
        self.albedo, self.shading, self.real = albedo, shading, real
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.model = Decomposer(cfg.decomposer)
        self.disc = PairDiscriminator(preset(cfg.disc_preset, pairing=cfg.disc_pairing,
                                             convention=cfg.disc_convention))
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.ema = (EmaState.from_params(self.model.state_dict(), cfg.ema_decay, cfg.ema_interval)
                    if cfg.ema_decay is not None else None)
        self.step = 0
        self.images_seen = 0

    @property
    def total_steps(self) -> int:
        return self.cfg.total_images // self.cfg.batch

    def step_kind(self, step: int) -> str:
        f = self.cfg.real_fraction
        return "real" if int((step + 1) * f) > int(step * f) else "paradigm"

    def run_step(self) -> dict:
        cfg = self.cfg
        rng = make_rng(cfg.seed, _BATCH_STREAM, self.step)
        kind = self.step_kind(self.step)
        self.model.train()
        if kind == "paradigm":
            batch = paradigm_batch(rng, self.albedo, self.shading, cfg.batch, cfg)
            record = adversarial_step(self.model, self.disc, self.opt_g, self.opt_d, cfg, paradigm=batch)
        else:
            real = torch.from_numpy(self.real.draw(rng, cfg.batch))
            pairs = paradigm_batch(rng, self.albedo, self.shading, cfg.batch, replace(cfg, ma01np_masking=False))
            record = adversarial_step(self.model, self.disc, self.opt_g, self.opt_d, cfg, real=real,
                                      pairs=(pairs["albedo"], pairs["shading"]))
        self.step += 1
        self.images_seen += cfg.batch
        if self.ema is not None:
            ema_update(self.ema, self.model, self.images_seen)
        return {"step": self.step - 1, "kind": kind, "images_seen": self.images_seen,
                "lr": self.opt_g.param_groups[0]["lr"], **record}

    # --- persistence ---------------------------------------------------------------------

    def checkpoint_blocks(self) -> dict:
        blocks = {}
        blocks.update(prefixed("model", self.model.state_dict()))
        blocks.update(prefixed("disc", self.disc.state_dict()))
        if self.ema is not None:
            blocks.update(prefixed("ema", self.ema.shadow))
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for idx, state in opt.state_dict()["state"].items():
                for key, value in state.items():
                    blocks[f"{name}.{idx}.{key}"] = value
        return blocks

    def save_checkpoint(self, path) -> Path:
        manifest = {
            "kind": "training-checkpoint",
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "step": self.step,
            "images_seen": self.images_seen,
            "ema_boundary": None if self.ema is None else self.ema.boundary,
            "param_groups": {"opt_g": self.opt_g.state_dict()["param_groups"],
                             "opt_d": self.opt_d.state_dict()["param_groups"]},
        }
        return save_bundle(path, self.checkpoint_blocks(), manifest)

    def load_state(self, path) -> None:
        blocks, manifest = load_bundle(path)
        self.model.load_state_dict(subset(blocks, "model"))
        self.disc.load_state_dict(subset(blocks, "disc"))
        if self.ema is not None:
            self.ema.shadow = subset(blocks, "ema")
            self.ema.boundary = manifest["ema_boundary"]
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            state = {}
            for key, value in subset(blocks, name).items():
                idx, field_name = key.split(".", 1)
                state.setdefault(int(idx), {})[field_name] = value
            opt.load_state_dict({"state": state, "param_groups": manifest["param_groups"][name]})
        self.step = manifest["step"]
        self.images_seen = manifest["images_seen"]

    @classmethod
    def resume(cls, path, albedo, shading, real=None, out_dir=None) -> "Trainer":
        _, manifest = load_bundle(path)
        trainer = cls(TrainConfig.from_dict(manifest["config"]), albedo, shading, real, out_dir)
        trainer.load_state(path)
        return trainer

    def train(self, log_path=None) -> list[Path]:
        """Run to ``total_images``; returns the checkpoint directories written."""
        log_path = Path(log_path) if log_path is not None else (
            self.out_dir / "train_log.jsonl" if self.out_dir is not None else None)
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            _truncate_log(log_path, self.step)
        checkpoints = []
        every = self.cfg.checkpoint_every
        while self.step < self.total_steps:
            before = self.images_seen
            record = self.run_step()
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if self.out_dir is not None and every and self.images_seen // every > before // every:
                checkpoints.append(self.save_checkpoint(self.out_dir / f"ckpt_{self.images_seen:010d}"))
        if self.out_dir is not None:
            final = self.out_dir / f"ckpt_{self.images_seen:010d}"
            if not checkpoints or checkpoints[-1] != final:
                checkpoints.append(self.save_checkpoint(final))
        return checkpoints


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < step]
    path.write_text("".join(line + "\n" for line in keep))


def train(cfg: TrainConfig, albedo: TileDictionary, shading: TileDictionary,
          real: Optional[TileDictionary] = None, out_dir=None) -> list[Path]:
    return Trainer(cfg, albedo, shading, real, out_dir).train()


def load_decomposer(path, use_ema: bool = True, dtype=torch.float32) -> Decomposer:
    """Decomposer from a training checkpoint, preferring the parameter average when present."""
    blocks, manifest = load_bundle(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = Decomposer(cfg.decomposer)
    params = subset(blocks, "ema") if use_ema else {}
    model.load_state_dict(params or subset(blocks, "model"))
    return model.to(dtype).eval()


def heldout_metrics(model: Decomposer, batch: dict) -> dict:
    """Paradigm albedo loss and mean absolute reconstruction residual on a fixed batch."""
    model.eval()
    with torch.no_grad():
        a, s, c = model(batch["image"])
        _, comps = loss_synthetic((a, s, c), batch, LossWeights())
        resid = (render(a, s, c) - batch["image"]).abs().mean()
    return {"L_a": float(comps["L_a"]), "residual": float(resid)}
