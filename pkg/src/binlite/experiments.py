"""Desk-scale experiments on the synthetic shape corpora.

Both experiments are deterministic functions of their seeds and are shared by
the scripts in ``scripts/`` and the acceptance suite.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import data as D
from . import synth
from .model import ArchPreset, ModelGraph, build_preset, copy_body
from .train import TrainConfig, TrainReport, evaluate, fit


@dataclass
class DeskLearningConfig:
    images_per_class: int = 100
    render_size: int = 64
    input_size: int = 64
    width: float = 0.25
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 3
    ratios: tuple = (0.7, 0.15, 0.15)
    seed: int = 0
    augment: bool = True


@dataclass
class DeskLearningResult:
    report: TrainReport
    best_val_accuracy: float
    test_accuracy: float
    counts: dict
    seconds: float


def desk_learning(cfg: DeskLearningConfig = DeskLearningConfig(), root=None,
                  log: Optional[Callable[[str], None]] = None) -> DeskLearningResult:
    """Write the six-class shape corpus to disk, then scan, split and fit ``scratch_cnn``."""
    t0 = time.perf_counter()
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="binlite-shapes-")
        root = tmp.name
    try:
        synth.write_dataset(root, synth.TASK_A, cfg.images_per_class, cfg.render_size, cfg.seed)
        manifest = D.split(D.scan_directory(root), cfg.ratios, cfg.seed)
        counts = {s: manifest.count(s) for s in D.SPLITS}
        graph = build_preset(ArchPreset("scratch_cnn", cfg.width, len(manifest.class_names)),
                             cfg.seed, (cfg.input_size, cfg.input_size, 3), manifest.class_names)
        tcfg = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                           max_epochs=cfg.max_epochs, patience=cfg.patience, seed=cfg.seed,
                           augment=D.AugmentConfig() if cfg.augment else None,
                           checkpoint_path=str(Path(root) / "best.bnlt"))
        report = fit(graph, manifest, tcfg, log=log)
        _, test_acc, _ = evaluate(graph, manifest, "test")
    finally:
        if tmp is not None:
            tmp.cleanup()
    return DeskLearningResult(report, report.best_metric, test_acc, counts,
                              time.perf_counter() - t0)


@dataclass
class TransferConfig:
    seeds: tuple = (0, 1, 2)
    per_class: tuple = (70, 15, 15)
    render_size: int = 64
    input_size: int = 32
    width: float = 0.25
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.01
    head_epochs: int = 10
    head_lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    data_seed: int = 100


@dataclass
class TransferResult:
    source_val_accuracy: list = field(default_factory=list)
    transfer_val_accuracy: list = field(default_factory=list)
    baseline_val_accuracy: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def margin_points(self) -> float:
        return 100.0 * (float(np.mean(self.transfer_val_accuracy))
                        - float(np.mean(self.baseline_val_accuracy)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["margin_points"] = self.margin_points
        return d


def _head_run(body_src: Optional[ModelGraph], data, cfg: TransferConfig, seed: int, ckpt) -> float:
    shape = (cfg.input_size, cfg.input_size, 3)
    g = build_preset(ArchPreset("mobilenet_transfer", cfg.width, len(data.class_names)),
                     seed + 1000, shape, data.class_names)
    if body_src is not None:
        copy_body(g, body_src)
    tcfg = TrainConfig(lr=cfg.head_lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                       max_epochs=cfg.head_epochs, patience=cfg.head_epochs, seed=seed,
                       checkpoint_path=str(ckpt))
    rep = fit(g, data, tcfg, log=None)
    return rep.epochs[-1]["val_acc"]


def transfer_benefit(cfg: TransferConfig = TransferConfig(),
                     log: Optional[Callable[[str], None]] = None) -> TransferResult:
    """Pretrain on task A, freeze the body, train a head on the disjoint task B.

    The baseline trains the same head, from the same seed, on a randomly
    initialised frozen body. Accuracies are the validation accuracy after the
    last head epoch.
    """
    t0 = time.perf_counter()
    src_data = synth.array_dataset(synth.TASK_A, cfg.per_class, cfg.input_size, cfg.render_size,
                                   cfg.data_seed)
    dst_data = synth.array_dataset(synth.TASK_B, cfg.per_class, cfg.input_size, cfg.render_size,
                                   cfg.data_seed + 100)
    out = TransferResult()
    shape = (cfg.input_size, cfg.input_size, 3)
    with tempfile.TemporaryDirectory(prefix="binlite-transfer-") as tmp:
        _transfer_seeds(cfg, src_data, dst_data, shape, Path(tmp), out, log)
    out.seconds = time.perf_counter() - t0
    return out


def _transfer_seeds(cfg, src_data, dst_data, shape, tmp: Path, out: TransferResult, log):
    for seed in cfg.seeds:
        src = build_preset(ArchPreset("mobilenet_v2", cfg.width, len(src_data.class_names)),
                           seed, shape, src_data.class_names)
        pre = fit(src, src_data, TrainConfig(lr=cfg.pretrain_lr, momentum=cfg.momentum,
                                             batch_size=cfg.batch_size,
                                             max_epochs=cfg.pretrain_epochs,
                                             patience=cfg.pretrain_epochs, seed=seed,
                                             augment=D.AugmentConfig(),
                                             checkpoint_path=str(tmp / "source.bnlt")), log=None)
        out.source_val_accuracy.append(pre.best_metric)
        out.transfer_val_accuracy.append(_head_run(src, dst_data, cfg, seed, tmp / "transfer.bnlt"))
        out.baseline_val_accuracy.append(_head_run(None, dst_data, cfg, seed, tmp / "baseline.bnlt"))
        if log is not None:
            log(f"seed {seed}  source val {pre.best_metric:.3f}  "
                f"transfer {out.transfer_val_accuracy[-1]:.3f}  "
                f"random body {out.baseline_val_accuracy[-1]:.3f}")
