"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run on its own with ``pytest tests/test_acceptance.py -v``. Criterion 3 needs the
six-class waste photo corpus; point ``BINLITE_TRASHNET`` at its root folder.
"""
import os
import time

import numpy as np
import pytest

from binlite import cli, fileformat
from binlite import layers as L
from binlite.data import resize_bilinear, scan_directory
from binlite.experiments import DeskLearningConfig, TransferConfig, desk_learning, transfer_benefit
from binlite.model import ArchPreset, build_preset, param_count
from binlite.quant import dequantize_once, infer, bench, quantize, top1_agreement
from binlite.train import EarlyStopping

import oracles


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail, seconds):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({seconds:.1f} s)")
        assert ok, detail

    return report


# -- 1 ------------------------------------------------------------------------------

def _random_case(kind, rng):
    n = int(rng.integers(2, 4))
    h = int(rng.integers(3, 7))
    c = int(rng.integers(1, 4))
    x4 = rng.standard_normal((n, h, h, c))
    skip = None
    if kind == "conv":
        k, s = int(rng.choice([1, 3])), int(rng.integers(1, 3))
        spec = L.conv(c, int(rng.integers(1, 4)), k, s, padding=str(rng.choice(["same", "valid"])))
        x = x4
    elif kind == "depthwise_conv":
        spec, x = L.depthwise_conv(c, 3, int(rng.integers(1, 3))), x4
    elif kind == "pointwise_conv":
        spec, x = L.pointwise_conv(c, int(rng.integers(1, 4))), x4
    elif kind == "batchnorm":
        spec, x = L.batchnorm(c), x4
    elif kind == "dense":
        d = int(rng.integers(2, 6))
        spec, x = L.dense(d, int(rng.integers(2, 5))), rng.standard_normal((n, d))
    elif kind == "dropout":
        spec, x = L.dropout(float(rng.choice([0.3, 0.5]))), x4
    elif kind == "maxpool":
        spec, x = L.maxpool(2, int(rng.integers(1, 3))), x4
    elif kind == "meanpool":
        spec, x = (L.meanpool(global_pool=True) if rng.random() < 0.5 else L.meanpool(2, 2)), x4
    elif kind == "residual_add":
        spec, x, skip = L.residual_add(0), x4, rng.standard_normal(x4.shape)
    elif kind == "softmax":
        spec, x = L.simple(kind), rng.standard_normal((n, int(rng.integers(2, 7))))
    else:  # relu, relu6, flatten
        spec, x = L.simple(kind), x4 * (4.0 if kind == "relu6" else 1.0)
    state = L.init_state(spec, rng, np.float64)
    if kind == "batchnorm":
        state.params["gamma"] = rng.standard_normal(c)
        state.params["beta"] = rng.standard_normal(c)
    return spec, state, x, skip


def test_criterion_01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for kind in L.KINDS:
        for _ in range(5):
            spec, state, x, skip = _random_case(kind, rng)
            err = L.grad_check(spec, state, x, 1e-5, skip=skip, seed=int(rng.integers(1 << 30)))
            worst[kind] = max(worst.get(kind, 0.0), err)
    top = max(worst, key=worst.get)
    dt = time.perf_counter() - t0
    verdict(1, max(worst.values()) < 1e-4 and dt < 60,
            f"{len(L.KINDS)} kinds x 5 shapes, worst rel err {worst[top]:.2e} ({top}) < 1e-4", dt)


# -- 2 ------------------------------------------------------------------------------

def test_criterion_02_parameter_counts(verdict):
    t0 = time.perf_counter()
    vgg = param_count(build_preset(ArchPreset("vgg16", 1.0, 1000), 0))
    body = param_count(build_preset(ArchPreset("mobilenet_v2", 1.0, 1000), 0), group="body")
    head = param_count(build_preset(ArchPreset("mobilenet_transfer", 1.0, 6), 0), trainable_only=True)
    exact = (vgg == oracles.vgg16_params(1000, 1.0, 224) and body == oracles.mobilenet_v2_body_params()
             and head == oracles.transfer_head_params(6))
    ok = vgg > 138_000_000 and 1_900_000 <= body <= 2_500_000 and head > 5_000_000 and exact
    dt = time.perf_counter() - t0
    verdict(2, ok and dt < 5, f"vgg16 {vgg:,}; mobilenet_v2 body {body:,}; transfer head {head:,}; "
            f"closed-form match {exact}", dt)


# -- 3 ------------------------------------------------------------------------------

TRASHNET_COUNTS = {"cardboard": 403, "glass": 501, "metal": 410, "paper": 594, "plastic": 482,
                   "trash": 137}


def test_criterion_03_waste_corpus_manifest(verdict, capsys):
    root = os.environ.get("BINLITE_TRASHNET")
    if not root or not os.path.isdir(root):
        with capsys.disabled():
            print("\n[SKIP] criterion 3: set BINLITE_TRASHNET to the corpus root to run the manifest check")
        pytest.skip("waste photo corpus not available")
    t0 = time.perf_counter()
    counts = scan_directory(root).class_counts()
    dt = time.perf_counter() - t0
    verdict(3, counts == TRASHNET_COUNTS and sum(counts.values()) == 2527 and dt < 10,
            f"class counts {counts}, total {sum(counts.values())}", dt)


# -- 4 ------------------------------------------------------------------------------

def _stop_point(values, patience=3, monitor="val_accuracy"):
    es = EarlyStopping(monitor, patience)
    for v in values:
        es.update(v)
        if es.should_stop:
            break
    return es.epoch, es.best_epoch


def _stop_oracle(values, patience, lower_is_better=False):
    """Independent restatement: stop once `patience` epochs pass without a strict improvement."""
    best_i, since = 0, 0
    for i in range(1, len(values)):
        better = values[i] < values[best_i] if lower_is_better else values[i] > values[best_i]
        if better:
            best_i, since = i, 0
        else:
            since += 1
            if since == patience:
                return i + 1, best_i + 1
    return len(values), best_i + 1


def test_criterion_04_early_stopping(verdict):
    t0 = time.perf_counter()
    ok = _stop_point([0.50, 0.60, 0.59, 0.58, 0.57]) == (5, 2)
    ok &= _stop_point([0.1, 0.2, 0.3, 0.4]) == (4, 4)
    rng = np.random.default_rng(4)
    for trial in range(300):
        seq = list(np.round(rng.random(int(rng.integers(1, 25))), 2))
        p = int(rng.integers(1, 6))
        mon = "val_loss" if trial % 2 else "val_accuracy"
        ok &= _stop_point(seq, p, mon) == _stop_oracle(seq, p, mon == "val_loss")
    dt = time.perf_counter() - t0
    verdict(4, bool(ok) and dt < 1, "patience-3 stop epoch and best epoch match on 302 sequences", dt)


# -- 5 ------------------------------------------------------------------------------

def test_criterion_05_quantized_file_sizes(verdict):
    t0 = time.perf_counter()
    parts = []
    ok = True
    for name in ("scratch_cnn", "mobilenet_v2"):
        g = build_preset(ArchPreset(name, 1.0, 6), 0)
        f32 = len(fileformat.dumps(g))
        r16 = len(fileformat.dumps(quantize(g, "f16"))) / f32
        r8 = len(fileformat.dumps(quantize(g, "i8_dynamic"))) / f32
        ok &= r16 <= 0.55 and r8 <= 0.30
        parts.append(f"{name} f16 {r16:.3f}x, i8 {r8:.3f}x")
    dt = time.perf_counter() - t0
    verdict(5, ok and dt < 10, "; ".join(parts) + " (limits 0.55 / 0.30)", dt)


# -- 6 ------------------------------------------------------------------------------

def _smooth_random_images(n, side, seed):
    """Bilinearly upsampled low-resolution uniform noise, a spread of coarse random structures."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, side, side, 3), np.float32)
    for i in range(n):
        k = int(rng.integers(2, 16))
        out[i] = np.clip(resize_bilinear(rng.random((k, k, 3), dtype=np.float32), side, side), 0, 1)
    return out


@pytest.mark.slow
def test_criterion_06_quantization_fidelity(verdict):
    t0 = time.perf_counter()
    g = build_preset(ArchPreset("scratch_cnn", 0.25, 6), 0)
    q = dequantize_once(quantize(g, "i8_dynamic"))
    worst = 0.0
    for a, b in zip(g.states, q.states):
        if "weight" in a.params:
            w, qt = a.params["weight"].astype(np.float64), b.params["weight"]
            worst = max(worst, float(np.max(np.abs(qt.payload * qt.scale - w)) / (qt.scale / 2)))
    x = _smooth_random_images(500, 224, seed=6)
    agree = top1_agreement(g, q, x)
    classes = np.bincount(infer(g, x[:100])[0].argmax(1), minlength=6)
    dt = time.perf_counter() - t0
    verdict(6, worst <= 1.0 + 1e-9 and agree >= 0.95 and dt < 120,
            f"max i8 error {worst:.4f} x (scale/2); top-1 agreement {agree:.3f} on 500 inputs "
            f"(f32 class histogram of first 100: {classes.tolist()})", dt)


# -- 7 ------------------------------------------------------------------------------

def test_criterion_07_thread_invariance(verdict, capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for name in ("scratch_cnn", "mobilenet_v2", "vgg16"):
        g = build_preset(ArchPreset(name, 0.25, 6), 0)
        x = _smooth_random_images(2, 224, seed=7)
        ref, _ = infer(g, x, 1)
        for t in (2, 4, 8):
            worst = max(worst, float(np.max(np.abs(infer(g, x, t)[0] - ref))))
    g = build_preset(ArchPreset("scratch_cnn", 0.25, 6), 0)
    rep = bench(g, [1, 2, 4, 8], iters=10, warmup=1)
    table_ok = [r.threads for r in rep.records] == [1, 2, 4, 8] and len(rep.table().splitlines()) == 6
    with capsys.disabled():
        print("\n" + rep.table())
    dt = time.perf_counter() - t0
    verdict(7, worst <= 1e-6 and table_ok and dt < 120,
            f"max diff across 1/2/4/8 threads {worst:.2e} <= 1e-6; bench table well formed "
            f"(mean ms by threads: {[round(r.mean_ms, 1) for r in rep.records]})", dt)


# -- 8 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_desk_scale_learning(verdict, tmp_path):
    cfg = DeskLearningConfig()
    res = desk_learning(cfg, root=tmp_path / "shapes")
    epochs = len(res.report.epochs)
    verdict(8, res.best_val_accuracy >= 0.90 and epochs <= 30 and res.seconds < 600,
            f"scratch_cnn width 1/4 at {cfg.input_size}px, splits {res.counts}: best val acc "
            f"{res.best_val_accuracy:.3f} (epoch {res.report.best_epoch} of {epochs}, "
            f"{res.report.stop_reason}); test acc {res.test_accuracy:.3f}", res.seconds)


# -- 9 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_transfer_benefit(verdict):
    res = transfer_benefit(TransferConfig())
    verdict(9, res.margin_points >= 5.0 and res.seconds < 1200,
            f"pretrained-body head {np.mean(res.transfer_val_accuracy):.3f} vs random-body head "
            f"{np.mean(res.baseline_val_accuracy):.3f} over seeds {list(TransferConfig().seeds)}: "
            f"margin {res.margin_points:.1f} points", res.seconds)


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_determinism(verdict, tmp_path, capsys):
    from binlite import synth

    t0 = time.perf_counter()
    data = synth.write_dataset(tmp_path / "d", synth.TASK_A, per_class=20, size=32, seed=3)
    runs = []
    for r in (1, 2):
        out = tmp_path / f"run{r}.bnlt"
        code = cli.main(["train", "--data", str(data), "--width", "0.25", "--size", "32",
                         "--epochs", "3", "--batch", "8", "--seed", "11", "--out", str(out), "--json"])
        capsys.readouterr()
        import json

        report = json.loads(open(f"{out}.report.json").read())
        runs.append((code, out.read_bytes(), [e["train_loss"] for e in report["epochs"]],
                     [e["val_loss"] for e in report["epochs"]]))
    same = runs[0][0] == runs[1][0] == 0 and runs[0][1:] == runs[1][1:]
    dt = time.perf_counter() - t0
    verdict(10, same and dt < 300,
            f"two train runs: model files bitwise identical {runs[0][1] == runs[1][1]}, "
            f"loss sequences identical {runs[0][2:] == runs[1][2:]}", dt)
