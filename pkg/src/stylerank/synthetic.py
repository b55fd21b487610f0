"""Procedurally generated shape/texture images for desk-scale experiments.

Every image carries two labels: a shape (``circle``, ``square``,
``triangle``, ``cross``) and a fill texture (``plain``, ``striped``,
``dotted``).  Colors, position, size and stripe orientation are randomized.

Run ``python -m stylerank.synthetic OUT_DIR`` to write PNG files plus
``shape.csv`` / ``texture.csv`` manifests.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .dataset import Dataset, LabeledSample, save_manifest

SHAPES = ("circle", "square", "triangle", "cross")
TEXTURES = ("plain", "striped", "dotted")


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.82 * r
    if shape == "triangle":
        # Apex up, base at dy = 0.75 r.
        return (dy <= 0.75 * r) & (dy >= -r) & (np.abs(dx) <= 0.62 * (dy + r))
    if shape == "cross":
        arm = 0.32 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def _texture_pattern(texture: str, yy: np.ndarray, xx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """1 where the primary fill color shows, 0 where the secondary one does."""
    if texture == "plain":
        return np.ones_like(yy, dtype=bool)
    if texture == "striped":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(5.0, 7.0)
        u = xx * np.cos(theta) + yy * np.sin(theta) + rng.uniform(0, period)
        return (u % period) < period / 2
    if texture == "dotted":
        period = rng.uniform(5.0, 7.0)
        oy, ox = rng.uniform(0, period, size=2)
        py = (yy + oy) % period - period / 2
        px = (xx + ox) % period - period / 2
        return (py ** 2 + px ** 2) > (0.28 * period) ** 2
    raise ValueError(f"unknown texture {texture!r}")


def render(shape: str, texture: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    r = rng.uniform(0.28, 0.38) * size
    mask = _shape_mask(shape, yy - cy, xx - cx, r)

    # Dark background, bright fill: random hues with a fixed contrast polarity.
    background = rng.uniform(0.0, 0.35, size=3)
    fill = rng.uniform(0.6, 1.0, size=3)
    secondary = background + rng.uniform(0.1, 0.2)
    pattern = _texture_pattern(texture, yy, xx, rng)

    img = np.empty((size, size, 3))
    img[:] = background
    img[mask & pattern] = fill
    img[mask & ~pattern] = secondary
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(n: int, seed: int = 0, size: int = 64):
    """Return ``(images, shape_labels, texture_labels)`` with classes balanced round-robin."""
    rng = np.random.default_rng(seed)
    combos = [(s, t) for s in range(len(SHAPES)) for t in range(len(TEXTURES))]
    order = rng.permutation(np.arange(n) % len(combos))
    images = np.empty((n, size, size, 3), dtype=np.float32)
    shape_labels = np.empty(n, dtype=np.int64)
    texture_labels = np.empty(n, dtype=np.int64)
    for i, c in enumerate(order):
        s, t = combos[c]
        images[i] = render(SHAPES[s], TEXTURES[t], rng, size)
        shape_labels[i], texture_labels[i] = s, t
    return images, shape_labels, texture_labels


def make_datasets(n: int, seed: int = 0, size: int = 64, prefix: str = "item") -> dict[str, Dataset]:
    """Datasets for the ``shape``, ``texture`` and joint ``combo`` tasks over the same images."""
    images, s, t = generate(n, seed, size)
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    combo_names = tuple(f"{a}-{b}" for a in SHAPES for b in TEXTURES)

    def build(labels, names, task):
        return Dataset(tuple(LabeledSample(i, img, int(l)) for i, img, l in zip(ids, images, labels)), names, task)

    return {
        "shape": build(s, SHAPES, "shape"),
        "texture": build(t, TEXTURES, "texture"),
        "combo": build(s * len(TEXTURES) + t, combo_names, "combo"),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("-n", type=int, default=750)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--format", choices=("png", "imgf32"), default="png")
    args = parser.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for task, ds in make_datasets(args.n, args.seed, args.size).items():
        save_manifest(ds, args.out_dir / f"{task}.csv", args.out_dir / "images", args.format)


if __name__ == "__main__":
    main()
