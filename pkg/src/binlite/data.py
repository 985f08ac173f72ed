"""Directory-driven dataset ingestion, preprocessing, augmentation and batching.

A dataset root holds one subdirectory per class; the folder name is the class
name. Images are binary PPM (P6) or PNG, optionally JPEG.
"""
from __future__ import annotations

import json
import math
import os
import queue
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, DecodeError, IngestionError

IMAGE_EXTENSIONS = {".ppm", ".png", ".jpg", ".jpeg"}
SPLITS = ("train", "val", "test")
DEFAULT_SIZE = 224
MAX_PREFETCH = 4


@dataclass
class DatasetManifest:
    root: str
    entries: list            # (relative path, class index)
    class_names: list
    splits: Optional[list] = None
    seed: Optional[int] = None

    def __post_init__(self):
        k = len(self.class_names)
        if list(self.class_names) != sorted(set(self.class_names)):
            raise IngestionError("class names must be sorted and unique")
        if any(not 0 <= c < k for _, c in self.entries):
            raise IngestionError("class index out of range")
        if self.splits is not None and len(self.splits) != len(self.entries):
            raise IngestionError("one split tag per entry required")

    def indices(self, split: str) -> list:
        if self.splits is None:
            raise ConfigurationError("manifest has not been split")
        return [i for i, s in enumerate(self.splits) if s == split]

    def count(self, split: str) -> int:
        return len(self.indices(split))

    def class_counts(self) -> dict:
        counts = {name: 0 for name in self.class_names}
        for _, c in self.entries:
            counts[self.class_names[c]] += 1
        return counts

    def labels(self, split: str) -> np.ndarray:
        return np.array([self.entries[i][1] for i in self.indices(split)], dtype=np.int64)

    def batches(self, split, batch_size, shuffle_seed=0, epoch=0, augment_cfg=None,
                size=DEFAULT_SIZE, cache=None, prefetch=0):
        return batches(self, split, batch_size, shuffle_seed, epoch, augment_cfg,
                       size=size, cache=cache, prefetch=prefetch)


@dataclass
class ArrayDataset:
    """In-memory counterpart of a split manifest: preprocessed tensors per split."""

    images: dict             # split -> float32 [n, h, w, 3]
    targets: dict            # split -> int64 [n]
    class_names: list

    def count(self, split: str) -> int:
        return len(self.targets.get(split, ()))

    def labels(self, split: str) -> np.ndarray:
        return np.asarray(self.targets.get(split, np.zeros(0, np.int64)), dtype=np.int64)

    def batches(self, split, batch_size, shuffle_seed=0, epoch=0, augment_cfg=None,
                size=None, cache=None, prefetch=0):
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        n = self.count(split)
        order = _order(n, split, shuffle_seed, epoch)
        x = self.images.get(split)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            if split == "train" and augment_cfg is not None and augment_cfg.enabled:
                xb = np.stack([augment(img, augment_cfg, _sample_rng(shuffle_seed, epoch, start + k))
                               for k, img in enumerate(xb)])
            yield xb, self.labels(split)[idx]


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    rotation_max_deg: float = 15.0
    center_crop_min_frac: float = 0.8
    enabled: bool = True

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigurationError("hflip_prob must be in [0, 1]")
        if not 0 <= self.rotation_max_deg <= 180:
            raise ConfigurationError("rotation_max_deg must be in [0, 180]")
        if not 0 < self.center_crop_min_frac <= 1:
            raise ConfigurationError("center_crop_min_frac must be in (0, 1]")


# -- ingestion ------------------------------------------------------------------

def scan_directory(root) -> DatasetManifest:
    """Index ``root/<class>/<image>``; ordering is lexicographic by relative path."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    for p in sorted(root.iterdir()):
        if p.is_file():
            warnings.warn(f"ignoring file outside any class folder: {p.name}", stacklevel=2)
    if not classes:
        raise IngestionError(f"dataset root {root} has no class folders")
    entries = []
    for ci, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise IngestionError(f"class folder {root / name} contains no images")
        entries += [(f"{name}/{f.name}", ci) for f in files]
    entries.sort(key=lambda e: e[0])
    return DatasetManifest(str(root), entries, classes)


def split(manifest: DatasetManifest, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetManifest:
    """Stratified per-class shuffle into train/val/test.

    Per class, val and test get ``floor(ratio * count)`` entries and train
    receives the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigurationError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tags = [None] * len(manifest.entries)
    for ci, name in enumerate(manifest.class_names):
        members = [i for i, (_, c) in enumerate(manifest.entries) if c == ci]
        members = [members[j] for j in rng.permutation(len(members))]
        n = len(members)
        n_val = math.floor(ratios[1] * n + 1e-9)
        n_test = math.floor(ratios[2] * n + 1e-9)
        n_train = n - n_val - n_test
        if n_val == 0 or n_test == 0:
            warnings.warn(f"class {name!r} with {n} images leaves an empty val or test split",
                          stacklevel=2)
        for j, i in enumerate(members):
            tags[i] = "train" if j < n_train else "val" if j < n_train + n_val else "test"
    return DatasetManifest(manifest.root, list(manifest.entries), list(manifest.class_names),
                           tags, seed)


def export_manifest(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"class_names": manifest.class_names, "seed": manifest.seed,
                             "root": manifest.root}) + "\n")
        for k, (rel, c) in enumerate(manifest.entries):
            tag = manifest.splits[k] if manifest.splits else None
            fh.write(json.dumps({"path": rel, "class": c, "split": tag}) + "\n")


def import_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "class_names" not in lines[0]:
        raise IngestionError(f"{path}: missing manifest header record")
    head, rows = lines[0], lines[1:]
    tags = [r["split"] for r in rows]
    return DatasetManifest(head.get("root", ""), [(r["path"], r["class"]) for r in rows],
                           head["class_names"], None if any(t is None for t in tags) else tags,
                           head.get("seed"))


# -- decoding -------------------------------------------------------------------

def _read_ppm(data: bytes, path) -> np.ndarray:
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DecodeError(f"{path}: malformed PPM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DecodeError(f"{path}: unsupported PPM geometry or maxval")
    pos += 1  # single whitespace after maxval
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DecodeError(f"{path}: truncated PPM payload")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def load_image(path) -> np.ndarray:
    """Decode to ``uint8 [h, w, 3]``; gray is replicated, alpha dropped."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    if data[:2] == b"P6":
        return _read_ppm(data, path)
    from PIL import Image, UnidentifiedImageError

    try:
        import io

        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "1", "LA"):
                g = np.asarray(im.convert("L"), dtype=np.uint8)
                return np.repeat(g[:, :, None], 3, axis=2)
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


# -- resampling -----------------------------------------------------------------

def _axis_weights(src: np.ndarray, n: int):
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, (src - lo).astype(np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, top=0.0, left=0.0,
                    height=None, width=None) -> np.ndarray:
    """Half-pixel-centred bilinear resample of the window ``[top, top+height) x [left, left+width)``.

    Defaults to the whole image. Samples outside the image replicate the edge.
    """
    h, w = img.shape[:2]
    height = h if height is None else height
    width = w if width is None else width
    img = img.astype(np.float32, copy=False)
    ys = top + (np.arange(out_h) + 0.5) * (height / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (width / out_w) - 0.5
    y0, y1, wy = _axis_weights(ys, h)
    x0, x1, wx = _axis_weights(xs, w)
    rows = img[y0] * (1 - wy)[:, None, None] + img[y1] * wy[:, None, None]
    return rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]


def sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at arbitrary float coordinates with edge replication."""
    h, w = img.shape[:2]
    y0, y1, wy = _axis_weights(ys, h)
    x0, x1, wx = _axis_weights(xs, w)
    wy, wx = wy[..., None], wx[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: np.ndarray, size=DEFAULT_SIZE) -> np.ndarray:
    """Bilinear resize to ``size`` and scale to ``[0, 1]`` as float32."""
    oh, ow = (size, size) if np.isscalar(size) else size
    x = image.astype(np.float32)
    if x.shape[:2] != (oh, ow):
        x = resize_bilinear(x, oh, ow)
    x /= np.float32(255.0)
    return np.clip(x, 0.0, 1.0, out=x)


# -- augmentation ---------------------------------------------------------------

def hflip(t: np.ndarray) -> np.ndarray:
    return t[:, ::-1, :].copy()


def rotate(t: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre, bilinear, edge-replicate fill."""
    h, w = t.shape[:2]
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    src_y = c * yy + s * xx + cy
    src_x = -s * yy + c * xx + cx
    return sample_bilinear(t, src_y, src_x).astype(t.dtype, copy=False)


def center_crop(t: np.ndarray, frac: float) -> np.ndarray:
    """Keep the central ``frac`` of each side and resize back to the original extent."""
    h, w = t.shape[:2]
    ch, cw = h * frac, w * frac
    return resize_bilinear(t, h, w, (h - ch) / 2, (w - cw) / 2, ch, cw).astype(t.dtype, copy=False)


def augment(t: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip, then rotation, then centre crop; shape and value range preserved."""
    if not cfg.enabled:
        return t
    flip = rng.random() < cfg.hflip_prob
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    frac = 1.0 - rng.random() * (1.0 - cfg.center_crop_min_frac)
    out = hflip(t) if flip else t
    if angle != 0.0:
        out = rotate(out, angle)
    if frac != 1.0:
        out = center_crop(out, frac)
    return np.clip(out, 0.0, 1.0)


# -- batching ---------------------------------------------------------------------

def _order(n: int, split_name: str, seed: int, epoch: int) -> np.ndarray:
    if split_name != "train":
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def _sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, position, 0xA06])


def load_preprocessed(manifest: DatasetManifest, index: int, size=DEFAULT_SIZE, cache=None):
    rel = manifest.entries[index][0]
    key = (rel, size if np.isscalar(size) else tuple(size))
    if cache is not None and key in cache:
        return cache[key]
    x = preprocess(load_image(os.path.join(manifest.root, rel)), size)
    if cache is not None:
        cache[key] = x
    return x


def batches(manifest: DatasetManifest, split: str, batch_size: int, shuffle_seed: int = 0,
            epoch: int = 0, augment_cfg: Optional[AugmentConfig] = None, size=DEFAULT_SIZE,
            cache: Optional[dict] = None, prefetch: int = 0) -> Iterator:
    """Yield ``(images [n,h,w,3], labels [n])`` for one epoch of ``split``.

    The train split is reshuffled per ``(shuffle_seed, epoch)`` and is the only
    split that is augmented. ``prefetch > 0`` builds batches on a worker thread
    (queue bounded at 4) without changing the stream.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    idx = manifest.indices(split)
    order = [idx[i] for i in _order(len(idx), split, shuffle_seed, epoch)]
    labels = np.array([manifest.entries[i][1] for i in order], dtype=np.int64)
    do_aug = split == "train" and augment_cfg is not None and augment_cfg.enabled

    def build(start):
        imgs = []
        for k, i in enumerate(order[start:start + batch_size]):
            x = load_preprocessed(manifest, i, size, cache)
            if do_aug:
                x = augment(x, augment_cfg, _sample_rng(shuffle_seed, epoch, start + k))
            imgs.append(x)
        return np.stack(imgs), labels[start:start + batch_size]

    starts = range(0, len(order), batch_size)
    if prefetch <= 0:
        for s in starts:
            yield build(s)
        return
    yield from _prefetched(build, starts, min(prefetch, MAX_PREFETCH))


_DONE = object()


def _prefetched(build, starts, depth):
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        try:
            for s in starts:
                if stop.is_set():
                    return
                q.put(build(s))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(_DONE)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.01)
