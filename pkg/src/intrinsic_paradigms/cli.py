"""Command line front end.

Options resolve as defaults, then the config file section for the command,
then flags.  The config file is INI text with sections ``[paradigm]``,
``[training]``, ``[inference]`` and ``[eval]`` whose keys are the long
option names with dashes replaced by underscores.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BoxplotStats, averaging_variance, bootstrap_whdr, simulated_test_sets, treatment_effect
from .dictionaries import TileDictionary, ingest_tile_dictionary
from .inference import decompose_image
from .io import FieldFormatError, read_json, write_json, write_png
from .paradigms import PARADIGM_PRESETS, ParadigmSampler, build_color_pool, make_rng
from .training import Trainer, sample_real_tiles
from .variants import VARIANTS, averaging_config, paradigm_config, train_config
from .whdr import FIXED_THRESHOLDS, MODES, PredictionRule, heldout_threshold, lightness_table, load_judgement_dir

log = logging.getLogger("intrinsic_paradigms")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SECTIONS = {"paradigm": "paradigm", "train": "training", "decompose": "inference", "eval": "eval"}


class ConfigError(ValueError):
    pass


# --- parser -----------------------------------------------------------------------------------


def _paradigm_opts(p):
    p.add_argument("--preset", default="default", choices=sorted(PARADIGM_PRESETS))
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", help="directory of real images for surface colors (default: bundled toy images)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intrinsic-paradigms", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file with per-command defaults")
    ap.add_argument("--verbose", "-v", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    par = sub.add_parser("paradigm", help="sample, cache or preview paradigm tiles")
    psub = par.add_subparsers(dest="action", required=True)
    p = psub.add_parser("sample", help="write individual paradigm examples")
    _paradigm_opts(p)
    p.add_argument("--n", type=int, default=16)
    p = psub.add_parser("dict", help="build albedo and shading dictionaries")
    _paradigm_opts(p)
    p.add_argument("--size", type=int, default=4000)
    p = psub.add_parser("preview", help="grid PNG of paradigm images")
    _paradigm_opts(p)
    p.add_argument("--n", type=int, default=16)

    p = sub.add_parser("train", help="train a decomposer")
    p.add_argument("--variant", default="Base", choices=sorted(VARIANTS))
    p.add_argument("--dicts", help="directory with albedo/ and shading/ dictionaries")
    p.add_argument("--ingest", help="directory with albedo/ and shading/ external tiles")
    p.add_argument("--real-images", help="directory of real training images (default: bundled toy split)")
    p.add_argument("--real-tiles", type=int, default=4000)
    p.add_argument("--images", type=int, default=200_000, help="total training images")
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--real-fraction", type=float, default=0.5)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True)

    p = sub.add_parser("decompose", help="decompose images with a trained model")
    p.add_argument("--checkpoint", nargs="+", required=True, help="one or more checkpoints (parameters averaged)")
    p.add_argument("--preset", default="Base", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true", help="use live rather than averaged parameters")
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="*", help="image files or directories (default: bundled toy images)")

    ev = sub.add_parser("eval", help="evaluation reports")
    esub = ev.add_subparsers(dest="action", required=True)
    for name, help_ in (("whdr", "disagreement under fixed, held-out and oracle thresholds"),
                        ("bootstrap", "disagreement over simulated test sets")):
        p = esub.add_parser(name, help=help_)
        p.add_argument("--decompositions", required=True)
        p.add_argument("--judgements", help="judgement directory (default: bundled toy judgements)")
        p.add_argument("--split", help="JSON with train/test id lists (default: all ids are test)")
        p.add_argument("--mode", default="albedo", choices=MODES)
        p.add_argument("--out", required=True)
        if name == "bootstrap":
            p.add_argument("--n-sets", type=int, default=50)
            p.add_argument("--p", type=float, default=0.2)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--plot", action="store_true", help="also render a boxplot PNG")
    p = esub.add_parser("treat", help="per-set differences between two bootstrap reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p = esub.add_parser("offsetvar", help="spread caused by random tile offsets")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--preset", default="Base", choices=sorted(VARIANTS))
    p.add_argument("--images", help="image directory (default: bundled toy images)")
    p.add_argument("--judgements")
    p.add_argument("--mode", default="albedo", choices=MODES)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the invariant checks")
    p.add_argument("--quick", action="store_true", help="skip gradient checks")
    p.add_argument("--checkpoint", help="also check that this checkpoint loads")

    p = sub.add_parser("config", help="print the documented config keys")
    p.add_argument("action", choices=["reference"])
    return ap


def _subparser(ap, *names):
    p = ap
    for n in names:
        action = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
        p = action.choices[n]
    return p


def apply_config(ap: argparse.ArgumentParser, argv) -> None:
    """Load ``--config`` (if any) into the defaults of the selected subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    if not Path(known.config).is_file():
        raise ConfigError(f"config file {known.config} not found")
    cp = configparser.ConfigParser()
    try:
        cp.read(known.config)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(SECTIONS.values())
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    command = next((a for a in rest if a in SECTIONS), None)
    if command is None or not cp.has_section(SECTIONS[command]):
        return
    parsers = [_subparser(ap, command)]
    if command in ("paradigm", "eval"):
        parsers = list(next(a for a in parsers[0]._actions
                            if isinstance(a, argparse._SubParsersAction)).choices.values())
    for key, value in cp.items(SECTIONS[command]):
        hits = 0
        for p in parsers:
            action = next((a for a in p._actions if a.dest == key), None)
            if action is None:
                continue
            hits += 1
            if isinstance(action, argparse._StoreTrueAction):
                p.set_defaults(**{key: cp.getboolean(SECTIONS[command], key)})
            else:
                p.set_defaults(**{key: value})
                action.required = False
        if not hits:
            raise ConfigError(f"unknown key {key!r} in [{SECTIONS[command]}]")


def config_reference(ap) -> str:
    lines = ["# config keys per section (INI); values as for the matching flags", ""]
    for command, section in SECTIONS.items():
        lines.append(f"[{section}]")
        parsers = [_subparser(ap, command)]
        nested = [a for a in parsers[0]._actions if isinstance(a, argparse._SubParsersAction)]
        if nested:
            parsers = list(nested[0].choices.values())
        seen = set()
        for p in parsers:
            for a in p._actions:
                if not a.option_strings or a.dest in seen or a.dest == "help":
                    continue
                seen.add(a.dest)
                lines.append(f"# {a.help or ''}".rstrip() if a.help else f"# --{a.dest.replace('_', '-')}")
                lines.append(f"{a.dest} = {'' if a.default is None else a.default}")
        lines.append("")
    return "\n".join(lines)


# --- commands ---------------------------------------------------------------------------------


def _real_images(path):
    from .pipeline import load_images, load_toy

    if path:
        return load_images(path)
    images, _, split = load_toy()
    return {k: images[k] for k in split["train"]}


def cmd_paradigm(args, run_config) -> None:
    cfg = paradigm_config("Base", tile=args.tile)
    cfg = replace(cfg, **PARADIGM_PRESETS[args.preset])
    images = list(_real_images(args.images).values())
    out = Path(args.out)
    if args.action == "dict":
        from .pipeline import paradigm_dictionaries

        albedo, shading = paradigm_dictionaries(cfg, images, args.size, args.seed)
        for d in (albedo, shading):
            d.meta["run_config"] = run_config
            d.save(out / d.kind)
        return
    pool = build_color_pool(images, 10_000, make_rng(args.seed, 1), clip=cfg.pool_clip)
    sampler = ParadigmSampler(pool, cfg, args.seed)
    examples = [sampler.example(make_rng(args.seed, 2, i)) for i in range(args.n)]
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "sample":
        for i, ex in enumerate(examples):
            write_png(out / f"sample_{i:04d}_image.png", np.clip(ex.image, 0, 1))
            write_png(out / f"sample_{i:04d}_albedo.png", ex.albedo)
            write_png(out / f"sample_{i:04d}_shading.png", ex.shading)
    else:
        cols = int(np.ceil(np.sqrt(args.n)))
        rows = int(np.ceil(args.n / cols))
        t = cfg.tile
        grid = np.ones((3, rows * (t + 2), cols * (t + 2)))
        for i, ex in enumerate(examples):
            r, c = divmod(i, cols)
            grid[:, r * (t + 2):r * (t + 2) + t, c * (t + 2):c * (t + 2) + t] = np.clip(ex.image, 0, 1)
        write_png(out / "preview.png", grid)
    write_json(out / "manifest.json", {"run_config": run_config, "paradigm": asdict(cfg), "count": args.n})


def cmd_train(args, run_config) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ingest:
        albedo, shading, paired = ingest_tile_dictionary(args.ingest, args.tile)
    elif args.dicts:
        albedo = TileDictionary.load(Path(args.dicts) / "albedo", args.tile)
        shading = TileDictionary.load(Path(args.dicts) / "shading", args.tile)
        paired = False
    else:
        raise ConfigError("train needs --dicts or --ingest")
    real = None
    if args.real_fraction > 0:
        real = sample_real_tiles(list(_real_images(args.real_images).values()), make_rng(args.seed, 3),
                                 args.real_tiles, args.tile)
    if args.resume:
        trainer = Trainer.resume(args.resume, albedo, shading, real, out)
    else:
        cfg = train_config(args.variant, batch=args.batch, total_images=args.images, seed=args.seed,
                           real_fraction=args.real_fraction, checkpoint_every=args.checkpoint_every)
        cfg = replace(cfg, decomposer=replace(cfg.decomposer, width=args.width, tile=args.tile),
                      paired_dictionaries=cfg.paired_dictionaries and paired)
        trainer = Trainer(cfg, albedo, shading, real, out)
    write_json(out / "run_config.json", run_config)
    for ck in trainer.train():
        print(ck)


def cmd_decompose(args, run_config) -> None:
    from .pipeline import decompose_images, load_images, load_model, load_toy

    model = load_model(args.checkpoint, use_ema=not args.no_ema)
    images = {}
    for src in args.images:
        images.update(load_images(src))
    if not args.images:
        images = load_toy()[0]
    cfg = averaging_config(args.preset, seed=args.seed)
    small = [k for k, im in images.items() if min(im.shape[1:]) < model.tile_size]
    if small:
        raise ConfigError(f"images smaller than the {model.tile_size}px tile: {small}")
    decompose_images(model, images, cfg, args.out, run_config)


def _judgements(path):
    from .pipeline import toy_root

    return load_judgement_dir(path or toy_root() / "judgements")


def _tables(dec_dir, judgements):
    from .pipeline import load_decomposition

    tables = {}
    for d in sorted(Path(dec_dir).iterdir()):
        if d.is_dir() and (d / "albedo.iikf").is_file() and d.name in judgements:
            tables[d.name] = lightness_table(load_decomposition(d).albedo, judgements[d.name])
    if not tables:
        raise FileNotFoundError(f"no decompositions in {dec_dir} match the judgements")
    return tables


def _split(path, ids):
    if not path:
        return [], sorted(ids)
    split = read_json(path)
    return [i for i in split["train"] if i in ids], [i for i in split["test"] if i in ids]


def _per_image(tables, judgements, ids, rule):
    from .whdr import whdr

    return {i: whdr(judgements[i], tables[i], rule) for i in ids}


def _strategies(tables, judgements, train_ids, mode):
    rules = {f"fixed_{t:g}": PredictionRule(mode, t) for t in FIXED_THRESHOLDS}
    if train_ids:
        tau = heldout_threshold([(judgements[i], tables[i]) for i in train_ids], mode=mode)
        rules["heldout"] = PredictionRule(mode, tau)
    return rules


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def render_boxplots(path, stats: dict, values: dict) -> None:
    """Plain boxplot chart, one box per entry, drawn with Pillow."""
    from PIL import Image, ImageDraw

    names = list(stats)
    lo = min(min(v) for v in values.values())
    hi = max(max(v) for v in values.values())
    if hi == lo:
        hi = lo + 1e-3
    w, h, pad = 120 * len(names) + 80, 360, 40
    img = Image.new("RGB", (w, h), "white")
    d = ImageDraw.Draw(img)

    def yv(v):
        return h - pad - (v - lo) / (hi - lo) * (h - 2 * pad)

    for k, name in enumerate(names):
        s = stats[name]
        cx = 80 + 120 * k
        d.rectangle([cx - 25, yv(s.q75), cx + 25, yv(s.q25)], outline="black")
        d.line([cx - 25, yv(s.median), cx + 25, yv(s.median)], fill="red", width=2)
        d.line([cx, yv(s.q75), cx, yv(s.whisker_hi)], fill="black")
        d.line([cx, yv(s.q25), cx, yv(s.whisker_lo)], fill="black")
        for o in s.outliers:
            d.ellipse([cx - 2, yv(o) - 2, cx + 2, yv(o) + 2], outline="blue")
        d.text((cx - 30, h - pad + 8), name, fill="black")
    d.text((4, 4), f"{hi:.4f}", fill="black")
    d.text((4, h - pad - 10), f"{lo:.4f}", fill="black")
    img.save(path)


def cmd_eval(args, run_config) -> None:
    from .whdr import oracle_threshold, threshold_report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "treat":
        a, b = read_json(args.report_a), read_json(args.report_b)
        if a["sets"] != b["sets"]:
            raise ConfigError("the two reports were scored on different simulated sets")
        report, values, stats = {"run_config": run_config, "a": args.report_a, "b": args.report_b}, {}, {}
        for key in sorted(set(a["per_set"]) & set(b["per_set"])):
            diffs, st = treatment_effect(a["per_set"][key], b["per_set"][key])
            values[key], stats[key] = diffs, st
            report[key] = {"differences": diffs, "stats": st.to_dict(), "a_better_fraction": float(np.mean(np.array(diffs) < 0))}
        write_json(out / "treatment.json", report)
        _write_csv(out / "treatment.csv", ["strategy", "set", "difference"],
                   [(k, i, v) for k, vs in values.items() for i, v in enumerate(vs)])
        if args.plot:
            render_boxplots(out / "treatment.png", stats, values)
        return
    if args.action == "offsetvar":
        from .pipeline import load_images, load_model, load_toy
        from .decomposer import TileDecomposer

        model = TileDecomposer(load_model(args.checkpoint))
        images = load_images(args.images) if args.images else load_toy()[0]
        judgements = _judgements(args.judgements)
        cfg = averaging_config(args.preset)
        std, values = averaging_variance(lambda im, seed: decompose_image(model, im, replace(cfg, seed=seed)),
                                         {k: images[k] for k in images if k in judgements}, judgements,
                                         PredictionRule(args.mode, args.tau), args.repeats, args.seed)
        write_json(out / "offsetvar.json", {"run_config": run_config, "std": std, "values": values})
        return
    judgements = _judgements(args.judgements)
    tables = _tables(args.decompositions, judgements)
    train_ids, test_ids = _split(args.split, tables)
    if not test_ids:
        raise ConfigError("no test images with decompositions")
    if args.action == "whdr":
        test_items = [(judgements[i], tables[i]) for i in test_ids]
        train_items = [(judgements[i], tables[i]) for i in train_ids]
        thresholds = threshold_report(test_items, train_items, args.mode)
        report = {"run_config": run_config, "test_ids": test_ids, "train_ids": train_ids,
                  "thresholds": thresholds,
                  "per_image": {k: _per_image(tables, judgements, test_ids, PredictionRule(args.mode, v["tau"]))
                                for k, v in thresholds.items()}}
        write_json(out / "whdr.json", report)
        _write_csv(out / "whdr.csv", ["strategy", "tau", "whdr"],
                   [(k, v["tau"], v["whdr"]) for k, v in report["thresholds"].items()])
        return
    sets = simulated_test_sets(test_ids, args.p, args.n_sets, make_rng(args.seed, 11))
    rules = _strategies(tables, judgements, train_ids, args.mode)
    per_set, stats = {}, {}
    for key, rule in rules.items():
        per_set[key], stats[key] = bootstrap_whdr(tables, judgements, sets, rule)
    oracle = [oracle_threshold([(judgements[i], tables[i]) for i in s], mode=args.mode)[1] for s in sets]
    per_set["oracle"], stats["oracle"] = oracle, BoxplotStats.from_values(oracle)
    report = {"run_config": run_config, "sets": sets, "per_set": per_set,
              "taus": {k: r.tau for k, r in rules.items()},
              "stats": {k: s.to_dict() for k, s in stats.items()},
              "std": {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in per_set.items()}}
    write_json(out / "bootstrap.json", report)
    _write_csv(out / "bootstrap.csv", ["strategy", "set", "whdr"],
               [(k, i, v) for k, vs in per_set.items() for i, v in enumerate(vs)])
    if args.plot:
        render_boxplots(out / "bootstrap.png", stats, per_set)


def cmd_selftest(args, run_config) -> int:
    from .selftest import run

    return EXIT_OK if run(quick=args.quick, checkpoint=args.checkpoint) else EXIT_FAIL


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        apply_config(ap, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        print(config_reference(ap))
        return EXIT_OK
    run_config = {k: v for k, v in vars(args).items()}
    run_config["version"] = __version__
    handlers = {"paradigm": cmd_paradigm, "train": cmd_train, "decompose": cmd_decompose,
                "eval": cmd_eval, "selftest": cmd_selftest}
    t0 = time.perf_counter()
    try:
        code = handlers[args.command](args, run_config)
    except (FileNotFoundError, FieldFormatError, IsADirectoryError, PermissionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
