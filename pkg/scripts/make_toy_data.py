"""Regenerate the bundled toy images and lightness judgements.

Each toy image is a piecewise-constant albedo times a smooth gray shading.
Judgements are derived from the known albedo, with a small fraction of
labels flipped to imitate disagreement between human raters.

    python3 scripts/make_toy_data.py [--out src/intrinsic_paradigms/data/toy]
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from intrinsic_paradigms.io import write_json, write_png
from intrinsic_paradigms.paradigms import kd_partition, make_rng
from intrinsic_paradigms.whdr import lightness_at

SIZES = [(192, 192), (192, 224), (208, 192), (192, 192), (224, 224), (192, 208), (200, 200), (192, 240)]
TEST_IDS = ["toy04", "toy05", "toy06", "toy07"]


def make_image(rng, h, w):
    labels = kd_partition(rng, h, w, 5, 600)
    colors = rng.uniform(0.15, 0.95, size=(labels.max() + 1, 3))
    albedo = colors[labels].transpose(2, 0, 1)
    noise = gaussian_filter(rng.standard_normal((h, w)), 20, mode="reflect")
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    shading = 0.3 + 0.7 * noise
    image = np.clip(albedo * shading[None], 0.0, 1.0)
    return albedo, image


def make_judgements(rng, albedo, n_points=30, n_pairs=50, ratio=1.1, flip=0.1):
    x = np.round(rng.uniform(0.02, 0.98, n_points), 4)
    y = np.round(rng.uniform(0.02, 0.98, n_points), 4)
    light = lightness_at(albedo, x, y)
    points = [{"id": int(i), "x": float(x[i]), "y": float(y[i])} for i in range(n_points)]
    comparisons = []
    for _ in range(n_pairs):
        i, j = rng.choice(n_points, size=2, replace=False)
        r = light[i] / light[j]
        label = "2" if r > ratio else "1" if r < 1 / ratio else "E"
        if rng.random() < flip:
            label = rng.choice([l for l in "12E" if l != label])
        comparisons.append({"point1": int(i), "point2": int(j), "darker": str(label),
                            "darker_score": float(np.round(rng.uniform(0.5, 1.0), 3))})
    return {"intrinsic_points": points, "intrinsic_comparisons": comparisons}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="src/intrinsic_paradigms/data/toy")
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "judgements").mkdir(parents=True, exist_ok=True)
    ids = []
    for k, (h, w) in enumerate(SIZES):
        rng = make_rng(args.seed, k)
        albedo, image = make_image(rng, h, w)
        name = f"toy{k:02d}"
        write_png(out / "images" / f"{name}.png", image)
        write_json(out / "judgements" / f"{name}.json", make_judgements(rng, albedo))
        ids.append(name)
    write_json(out / "split.json", {"train": [i for i in ids if i not in TEST_IDS], "test": TEST_IDS})


if __name__ == "__main__":
    main()
