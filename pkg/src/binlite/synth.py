"""Seeded synthetic image corpora of coloured shapes on noisy backgrounds.

Class identity is carried by shape only; foreground and background colours
are drawn independently of the class.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ArrayDataset, preprocess, write_ppm


def _rot(dy, dx, a):
    c, s = np.cos(a), np.sin(a)
    return c * dy - s * dx, s * dy + c * dx


def _circle(dy, dx, r):
    return dy ** 2 + dx ** 2 < r ** 2


def _square(dy, dx, r):
    return (np.abs(dy) < 0.8 * r) & (np.abs(dx) < 0.8 * r)


def _triangle(dy, dx, r):
    y = dy + 0.25 * r
    return (y < 0.5 * r) & (np.abs(dx) < (y + r) * 0.6)


def _plus(dy, dx, r):
    arm = r / 3
    return ((np.abs(dx) < arm) & (np.abs(dy) < r)) | ((np.abs(dy) < arm) & (np.abs(dx) < r))


def _ring(dy, dx, r):
    d2 = dy ** 2 + dx ** 2
    return (d2 < r ** 2) & (d2 > (0.55 * r) ** 2)


def _diamond(dy, dx, r):
    return np.abs(dy) + np.abs(dx) < r


def _frame(dy, dx, r):
    outer = (np.abs(dy) < 0.85 * r) & (np.abs(dx) < 0.85 * r)
    inner = (np.abs(dy) < 0.45 * r) & (np.abs(dx) < 0.45 * r)
    return outer & ~inner


def _xcross(dy, dx, r):
    u, v = _rot(dy, dx, np.pi / 4)
    return _plus(u, v, r)


def _crescent(dy, dx, r):
    return _circle(dy, dx, r) & ~_circle(dy, dx - 0.45 * r, 0.85 * r)


def _half_disk(dy, dx, r):
    return _circle(dy, dx, r) & (dy > 0)


def _two_dots(dy, dx, r):
    return _circle(dy, dx - 0.5 * r, 0.42 * r) | _circle(dy, dx + 0.5 * r, 0.42 * r)


def _ell(dy, dx, r):
    vert = (np.abs(dx + 0.5 * r) < 0.3 * r) & (np.abs(dy) < r)
    foot = (np.abs(dy - 0.7 * r) < 0.3 * r) & (np.abs(dx) < 0.8 * r)
    return vert | foot


SHAPES = {
    "circle": _circle, "square": _square, "triangle": _triangle,
    "plus": _plus, "ring": _ring, "diamond": _diamond,
    "frame": _frame, "xcross": _xcross, "crescent": _crescent,
    "half_disk": _half_disk, "two_dots": _two_dots, "ell": _ell,
}
TASK_A = ("circle", "diamond", "plus", "ring", "square", "triangle")
TASK_B = ("crescent", "ell", "frame", "half_disk", "two_dots", "xcross")


def render(shape: str, size: int, rng: np.random.Generator, max_tilt_deg: float = 10.0) -> np.ndarray:
    """One ``uint8 [size, size, 3]`` image of ``shape``.

    The shape is always lighter than the background in every channel, but both
    colours are drawn at random, so colour carries no class information.
    """
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    r = size * rng.uniform(0.28, 0.36)
    cy = size / 2 + size * rng.uniform(-0.08, 0.08)
    cx = size / 2 + size * rng.uniform(-0.08, 0.08)
    dy, dx = _rot(yy - cy, xx - cx, np.deg2rad(rng.uniform(-max_tilt_deg, max_tilt_deg)))
    mask = SHAPES[shape](dy, dx, r)
    bg = rng.uniform(0, 90, 3)
    fg = rng.uniform(150, 255, 3)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, 8, (size, size, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_dataset(root, classes=TASK_A, per_class: int = 100, size: int = 64, seed: int = 0) -> Path:
    """Write ``root/<class>/<nnnn>.ppm`` for every class."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name in classes:
        (root / name).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            write_ppm(root / name / f"{i:04d}.ppm", render(name, size, rng))
    return root


def array_dataset(classes=TASK_A, per_class=(70, 15, 15), size: int = 32,
                  render_size: int = 64, seed: int = 0) -> ArrayDataset:
    """In-memory preprocessed splits with ``per_class`` images per class in train/val/test."""
    rng = np.random.default_rng(seed)
    images, targets = {}, {}
    for split_name, n in zip(("train", "val", "test"), per_class):
        xs, ys = [], []
        for ci, name in enumerate(sorted(classes)):
            for _ in range(n):
                xs.append(preprocess(render(name, render_size, rng), size))
                ys.append(ci)
        images[split_name] = np.stack(xs) if xs else np.zeros((0, size, size, 3), np.float32)
        targets[split_name] = np.array(ys, dtype=np.int64)
    return ArrayDataset(images, targets, sorted(classes))
