"""Loss, SGD with momentum, the early-stopping fit loop and evaluation."""
from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import fileformat
from .data import AugmentConfig
from .errors import ConfigurationError, LabelError, NumericError, ShapeError
from .model import ModelGraph, predict, run_backward, run_forward
from .tensor import QuantTensor

PROB_FLOOR = 1e-12
MONITORS = ("val_loss", "val_accuracy")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    monitor: str = "val_accuracy"
    augment: Optional[AugmentConfig] = None
    checkpoint_path: Optional[str] = None
    cache_images: bool = True
    prefetch: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be >= 1")
        if self.monitor not in MONITORS:
            raise ConfigurationError(f"monitor must be one of {MONITORS}")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stop_reason: Optional[str] = None
    best_epoch: Optional[int] = None
    best_metric: Optional[float] = None
    best_checkpoint: Optional[str] = None
    monitor: str = "val_accuracy"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


# -- loss ---------------------------------------------------------------------------

def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= k)):
        raise LabelError(f"labels must be integers in [0, {k})")
    return labels.astype(np.intp)


def cross_entropy(probs: np.ndarray, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``probs``."""
    if probs.ndim != 2:
        raise ShapeError(f"probs must be [n, k], got {probs.shape}")
    n, k = probs.shape
    labels = _check_labels(labels, k)
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} rows")
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (n * picked)
    return loss, grad


def softmax_cross_entropy_grad(probs: np.ndarray, labels):
    """Fused path: loss and gradient w.r.t. the logits feeding the softmax."""
    n, k = probs.shape
    labels = _check_labels(labels, k)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, labels], PROB_FLOOR))))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


# -- optimizer ------------------------------------------------------------------------

def sgd_momentum_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float):
    """Classical momentum: ``v <- momentum*v - lr*g``; ``w <- w + v``. Returns new arrays."""
    if not params.shape == grads.shape == velocity.shape:
        raise ShapeError(f"shapes differ: {params.shape}, {grads.shape}, {velocity.shape}")
    dt = params.dtype.type
    v = dt(momentum) * velocity - dt(lr) * grads
    return params + v, v


class SGDMomentum:
    """In-place classical momentum over a graph's trainable parameters."""

    def __init__(self, lr: float, momentum: float):
        self.lr, self.momentum = lr, momentum
        self.velocity = {}

    def step(self, graph: ModelGraph, grads: dict):
        for i, named in grads.items():
            params = graph.states[i].params
            for name, g in named.items():
                w = params[name]
                if isinstance(w, QuantTensor):
                    raise ConfigurationError("cannot train a quantized graph")
                key = (i, name)
                v = self.velocity.get(key)
                if v is None:
                    v = self.velocity[key] = np.zeros_like(w)
                if v.shape != g.shape:
                    raise ShapeError(f"gradient shape {g.shape} != parameter shape {v.shape}")
                v *= w.dtype.type(self.momentum)
                v -= w.dtype.type(self.lr) * g
                w += v


# -- early stopping --------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best monitored value; improvement must be strictly better.

    Epochs are 1-based. Ties keep the earlier epoch.
    """

    def __init__(self, monitor: str = "val_accuracy", patience: int = 3):
        if monitor not in MONITORS:
            raise ConfigurationError(f"monitor must be one of {MONITORS}")
        self.monitor, self.patience = monitor, patience
        self.best = None
        self.best_epoch = None
        self.wait = 0
        self.epoch = 0

    def _better(self, value, best):
        return value < best if self.monitor == "val_loss" else value > best

    def update(self, value: float) -> bool:
        """Record one epoch's monitored value; returns True when it is a new best."""
        self.epoch += 1
        if self.best is None or self._better(value, self.best):
            self.best, self.best_epoch, self.wait = value, self.epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


# -- evaluation ------------------------------------------------------------------------

def evaluate(graph: ModelGraph, data, split: str = "val", batch_size: int = 64, cache=None):
    """Inference-mode ``(loss, accuracy, confusion)``; confusion rows are true classes."""
    k = graph.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    total_loss, total = 0.0, 0
    for xb, yb in data.batches(split, batch_size, size=graph.input_shape[:2], cache=cache):
        probs = predict(graph, xb)
        loss, _ = cross_entropy(probs, yb)
        total_loss += loss * len(yb)
        total += len(yb)
        np.add.at(confusion, (yb, probs.argmax(axis=1)), 1)
    if total == 0:
        raise ConfigurationError(f"split {split!r} is empty")
    return total_loss / total, float(np.trace(confusion) / total), confusion


# -- fit ---------------------------------------------------------------------------------

def train_epoch(graph: ModelGraph, data, cfg: TrainConfig, opt: SGDMomentum,
                rng: np.random.Generator, epoch: int, cache=None):
    """One pass over the train split; returns ``(mean loss, accuracy)``."""
    if graph.specs[-1].kind != "softmax":
        raise ConfigurationError("graph must end in softmax")
    top = len(graph.specs) - 2
    total_loss, correct, total = 0.0, 0, 0
    stream = data.batches("train", cfg.batch_size, cfg.seed, epoch, cfg.augment,
                          size=graph.input_shape[:2], cache=cache, prefetch=cfg.prefetch)
    for xb, yb in stream:
        probs = run_forward(graph, xb.astype(np.float32, copy=False), "train", rng)
        loss, dlogits = softmax_cross_entropy_grad(probs, yb)
        if not math.isfinite(loss):
            return float("nan"), 0.0
        grads = run_backward(graph, dlogits.astype(np.float32, copy=False), start=top)
        opt.step(graph, grads)
        total_loss += loss * len(yb)
        correct += int((probs.argmax(axis=1) == yb).sum())
        total += len(yb)
    for st in graph.states:
        st.cache = None
    return total_loss / total, correct / total


def fit(graph: ModelGraph, data, cfg: TrainConfig,
        log: Optional[Callable[[str], None]] = print) -> TrainReport:
    """Train with early stopping; the graph ends restored to its best epoch.

    ``data`` is a split ``DatasetManifest`` or an ``ArrayDataset``.
    """
    if data.count("train") == 0:
        raise ConfigurationError("train split is empty")
    if data.count("val") == 0:
        raise ConfigurationError("val split is empty")
    ckpt = cfg.checkpoint_path or str(Path(tempfile.mkdtemp(prefix="binlite-")) / "best.bnlt")
    report = TrainReport(best_checkpoint=ckpt, monitor=cfg.monitor)
    stopper = EarlyStopping(cfg.monitor, cfg.patience)
    opt = SGDMomentum(cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    cache = {} if cfg.cache_images else None
    best_snap = None

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss, train_acc = train_epoch(graph, data, cfg, opt, rng, epoch, cache)
        if not math.isfinite(train_loss):
            report.stop_reason = "numeric_error"
            raise NumericError(f"non-finite training loss at epoch {epoch}", report)
        val_loss, val_acc, _ = evaluate(graph, data, "val", cache=cache)
        ms = (time.perf_counter() - t0) * 1000
        report.epochs.append(dict(epoch=epoch, train_loss=train_loss, train_acc=train_acc,
                                  val_loss=val_loss, val_acc=val_acc, wall_ms=ms))
        if log is not None:
            log(f"epoch {epoch:3d}  loss {train_loss:.4f}  acc {train_acc:.4f}  "
                f"val_loss {val_loss:.4f}  val_acc {val_acc:.4f}  {ms:.0f} ms")
        monitored = val_loss if cfg.monitor == "val_loss" else val_acc
        if stopper.update(monitored):
            best_snap = graph.snapshot()
            report.best_epoch, report.best_metric = epoch, monitored
            fileformat.save(graph, ckpt)
        if stopper.should_stop:
            report.stop_reason = "early_stopped"
            break
    else:
        report.stop_reason = "max_epochs"

    graph.restore(best_snap)
    return report
