"""Deterministic synthetic image datasets for desk-scale pipeline runs.

Each class gets its own color, shape, and texture signature so that even
a random-weight trunk yields linearly separable pooled features.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .augment import derive_rng, save_png
from .errors import InvalidParameterError

PALETTE = (
    (220, 60, 60),
    (60, 200, 80),
    (70, 90, 220),
    (235, 220, 70),
    (205, 80, 205),
    (80, 215, 215),
    (240, 150, 60),
)

SHAPES = ("disc", "square", "triangle", "ring", "stripes", "cross", "diamond")

MAX_CLASSES = len(PALETTE)


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (r - dy) / 2 + r / 2)
    if shape == "ring":
        dist = np.sqrt(dy * dy + dx * dx)
        return (dist <= r) & (dist >= r * 0.55)
    if shape == "stripes":
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return box & (np.floor((yy + xx) / 4.0) % 2 == 0)
    if shape == "cross":
        box = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return box & ((np.abs(dx) <= r / 3) | (np.abs(dy) <= r / 3))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise InvalidParameterError(f"unknown shape {shape!r}")


def _render(class_idx: int, rng: np.random.Generator, size: int) -> np.ndarray:
    img = rng.integers(0, 55, size=(size, size, 3)).astype(np.float64)
    r = rng.uniform(size * 0.28, size * 0.4)
    cy = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    cx = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    mask = _shape_mask(SHAPES[class_idx], size, cy, cx, r)
    color = np.asarray(PALETTE[class_idx], dtype=np.float64)
    speckle = rng.uniform(-18, 18, size=(size, size, 3))
    img[mask] = (color + speckle[mask])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_dataset(out_dir, n_per_class: int = 30, n_classes: int = 5,
                           seed: int = 0, image_size: int = 64) -> list:
    """Write n_classes directories of PNGs under out_dir.

    Byte-identical for identical arguments: every image derives its rng
    stream from (seed, class, index) alone.
    """
    if not 2 <= n_classes <= MAX_CLASSES:
        raise InvalidParameterError(
            f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")
    if n_per_class < 1:
        raise InvalidParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    paths = []
    for c in range(n_classes):
        cls_dir = out_dir / f"{SHAPES[c]}_{c}"
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = derive_rng(seed, c * 1_000_000 + i, 0)
            img = _render(c, rng, image_size)
            path = cls_dir / f"{SHAPES[c]}_{i:04d}.png"
            save_png(path, img)
            paths.append(path)
    return paths
