"""Synthetic 3-class texture images (stripes, checkerboard, dots) for desk-scale benchmarks.

Each image draws its own colours, orientation, frequency, phase, contrast and
pixel noise, so a classifier has to learn the texture type rather than any
single low-level cue. Every pattern family is closed under horizontal flips.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from nlbench.dataman import DatasetManifest, Record, save_manifest

TEXTURE_CLASSES = ("stripes", "checker", "dots")


@np.errstate(all="ignore")
def _pattern(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.10, 0.22)
    phase = rng.uniform(0, 2 * np.pi)
    a = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
    if kind == 0:
        return 0.5 + 0.5 * np.sin(a)
    if kind == 1:
        b = 2 * np.pi * freq * (-xx * np.sin(theta) + yy * np.cos(theta)) + rng.uniform(0, 2 * np.pi)
        return 0.5 + 0.5 * np.sin(a) * np.sin(b)
    n = rng.integers(5, 11)
    cy, cx = rng.uniform(-2, size + 2, (2, n))
    sigma = rng.uniform(1.3, 2.4, n)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    return np.clip(np.exp(-d2 / (2 * sigma[:, None, None] ** 2)).sum(axis=0), 0, 1)


def texture_image(kind: int, rng: np.random.Generator, size: int = 32, noise: float = 0.12,
                  contrast: tuple[float, float] = (0.25, 0.8)) -> np.ndarray:
    """One ``size x size x 3`` uint8 texture of class ``kind``."""
    if kind not in range(len(TEXTURE_CLASSES)):
        raise ValueError(f"texture class must be in [0, {len(TEXTURE_CLASSES)})")
    p = _pattern(kind, rng, size)
    bg = rng.uniform(0, 1, 3)
    direction = rng.normal(size=3)
    fg = np.clip(bg + rng.uniform(*contrast) * direction / np.linalg.norm(direction), 0, 1)
    img = bg + (fg - bg) * p[..., None]
    img = img + rng.normal(0, noise, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def texture_arrays(n: int, seed: int, size: int = 32, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """``n`` images with balanced labels in a seeded random order."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(TEXTURE_CLASSES))
    images = np.stack([texture_image(int(k), rng, size, **kwargs) for k in labels])
    return images, labels


def generate_textures(out_dir: str | Path, n_train: int = 5000, n_test: int = 1000, size: int = 32,
                      seed: int = 0, name: str = "textures", **kwargs) -> DatasetManifest:
    """Write PNGs and ``manifest.csv`` under ``out_dir``; reuses an existing complete set."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.csv"
    if manifest_path.is_file():
        from nlbench.dataman import load_manifest

        m = load_manifest(manifest_path)
        if len(m.train) == n_train and len(m.test) == n_test:
            return m
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1_000_003)):
        images, labels = texture_arrays(n, s, size, **kwargs)
        for i, (img, y) in enumerate(zip(images, labels)):
            rel = f"images/{split}_{i:05d}.png"
            Image.fromarray(img).save(out_dir / rel)
            records.append(Record(f"{split}_{i:05d}", rel, int(y), split))
    manifest = DatasetManifest(tuple(records), TEXTURE_CLASSES, name=name, base_dir=str(out_dir))
    save_manifest(manifest, manifest_path)
    return manifest
