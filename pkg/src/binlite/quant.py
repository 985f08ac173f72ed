"""Post-training weight quantization and the multi-threaded inference engine."""
from __future__ import annotations

import copy
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import fileformat
from . import layers as L
from . import tensor as T
from .errors import ConfigurationError
from .model import ModelGraph, check_batch
from .tensor import ConvSpec, QuantTensor

MODES = ("f16", "i8_dynamic")
I8_MAX = 127


# -- quantization ----------------------------------------------------------------

def quantize_tensor(w: np.ndarray, mode: str) -> QuantTensor:
    if mode == "f16":
        return QuantTensor("f16", tuple(w.shape), w.astype(np.float16))
    if mode != "i8_dynamic":
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(amax / I8_MAX)) if amax > 0 else 1.0
    q = np.clip(np.round(w.astype(np.float64) / scale), -I8_MAX, I8_MAX).astype(np.int8)
    return QuantTensor("i8", tuple(w.shape), q, scale)


def quantize(graph: ModelGraph, mode: str) -> ModelGraph:
    """Copy of ``graph`` whose weight tensors are stored as f16 or symmetric int8.

    Biases, batch-norm parameters and running statistics stay float32;
    activations and arithmetic remain float32.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if weight_dtype(graph) != "f32":
        raise ConfigurationError("graph is already quantized")
    out = copy.deepcopy(graph)
    for st in out.states:
        st.cache = None
        if "weight" in st.params:
            st.params["weight"] = quantize_tensor(st.params["weight"], mode)
    out.metadata["quantization"] = mode
    return out


def weight_dtype(graph: ModelGraph) -> str:
    for st in graph.states:
        w = st.params.get("weight")
        if isinstance(w, QuantTensor):
            return w.dtype
    return "f32"


def dequantize_once(graph: ModelGraph) -> ModelGraph:
    """Populate every QuantTensor's float32 cache. Idempotent; not thread-safe."""
    for st in graph.states:
        for p in st.params.values():
            if isinstance(p, QuantTensor) and p.cache is None:
                p.cache = p.dequantize()
    return graph


# -- threaded execution ------------------------------------------------------------

def _chunks(n: int, parts: int):
    bounds = np.linspace(0, n, min(parts, n) + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class InferenceEngine:
    """Runs inference-mode forward passes with work split across a thread pool.

    Spatial layers are partitioned by output row and dense layers by output
    unit, in fixed contiguous chunks, so every thread count computes each
    output element with the same arithmetic.
    """

    def __init__(self, threads: int = 1):
        if int(threads) < 1:
            raise ConfigurationError(f"threads must be >= 1, got {threads}")
        self.threads = int(threads)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, parts):
        if self._pool is None:
            return [fn(p) for p in parts]
        return list(self._pool.map(fn, parts))

    def _rows(self, x, oh, slab, compute):
        """Compute output rows chunk-by-chunk; ``slab(r0, r1)`` gives the input rows needed."""
        parts = _chunks(oh, self.threads)
        outs = self._map(lambda p: compute(slab(*p)), parts)
        return outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)

    def _layer(self, spec, st, x, skip):
        k, h = spec.kind, spec.hyper
        if k in ("conv", "depthwise_conv", "pointwise_conv"):
            cs = L.conv_spec(spec)
            oh, _ = cs.output_hw(x.shape[1], x.shape[2])
            xp = T._pad(x, cs.pads(x.shape[1], x.shape[2]))
            valid = ConvSpec(cs.kernel_h, cs.kernel_w, cs.stride, "valid",
                             cs.in_channels, cs.out_channels)
            w, b = L.param(st, "weight"), L.param(st, "bias")
            op = T.depthwise_conv2d if k == "depthwise_conv" else T.conv2d
            s = cs.stride
            return self._rows(xp, oh, lambda r0, r1: xp[:, r0 * s:(r1 - 1) * s + cs.kernel_h],
                              lambda slab: op(slab, valid, w, b))
        if k in ("maxpool", "meanpool") and not h.get("global_pool"):
            win, s = h["window"], h["stride"]
            oh, _ = T.pool_output_hw(x.shape[1], x.shape[2], win, s)
            mode = "max" if k == "maxpool" else "mean"
            return self._rows(x, oh, lambda r0, r1: x[:, r0 * s:(r1 - 1) * s + win],
                              lambda slab: T.pool2d(slab, win, s, mode))
        if k == "dense":
            w, b = L.param(st, "weight"), L.param(st, "bias")

            def cols(p):
                c0, c1 = p
                y = x @ w[:, c0:c1]
                return y + b[c0:c1] if b is not None else y

            outs = self._map(cols, _chunks(w.shape[1], self.threads))
            return outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        return L.forward(spec, st, x, "infer", None, skip)

    def forward(self, graph: ModelGraph, batch: np.ndarray) -> np.ndarray:
        check_batch(graph, batch)
        x = batch.astype(np.float32, copy=False)
        sources = graph.residual_sources
        saved = {}
        with threadpool_limits(limits=1, user_api="blas"):
            for i, (spec, st) in enumerate(graph.layers):
                if i in sources:
                    saved[i] = x
                skip = saved[spec.hyper["source"]] if spec.kind == "residual_add" else None
                x = self._layer(spec, st, x, skip)
        return x

    def infer(self, graph: ModelGraph, batch: np.ndarray):
        t0 = time.perf_counter()
        probs = self.forward(graph, batch)
        return probs, (time.perf_counter() - t0) * 1000.0


def infer(graph: ModelGraph, batch: np.ndarray, threads: int = 1):
    """``(probs [n, k], latency_ms)`` using ``threads`` worker threads."""
    with InferenceEngine(threads) as eng:
        return eng.infer(graph, batch)


def top1_agreement(a: ModelGraph, b: ModelGraph, batch: np.ndarray, chunk: int = 50) -> float:
    agree = 0
    with InferenceEngine(1) as eng:
        for i in range(0, len(batch), chunk):
            xb = batch[i:i + chunk]
            agree += int((eng.forward(a, xb).argmax(1) == eng.forward(b, xb).argmax(1)).sum())
    return agree / len(batch)


# -- benchmarking -----------------------------------------------------------------

@dataclass
class BenchRecord:
    threads: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    iters: int


@dataclass
class BenchReport:
    records: list = field(default_factory=list)
    file_size_bytes: int = 0
    dtype: str = "f32"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [f"dtype {self.dtype}   model size {self.file_size_bytes} bytes",
                 f"{'threads':>7}  {'mean_ms':>9}  {'p50_ms':>9}  {'p95_ms':>9}  {'iters':>5}"]
        for r in self.records:
            lines.append(f"{r.threads:>7d}  {r.mean_ms:>9.3f}  {r.p50_ms:>9.3f}  {r.p95_ms:>9.3f}  {r.iters:>5d}")
        return "\n".join(lines)


def bench(graph: ModelGraph, thread_counts: Sequence[int] = (1, 2, 4), iters: int = 10,
          warmup: int = 1, seed: int = 0, image: Optional[np.ndarray] = None) -> BenchReport:
    """Time single-image inference per thread count; no claim about the curve's shape."""
    if iters < 10 or warmup < 1:
        raise ConfigurationError("bench needs iters >= 10 and warmup >= 1")
    counts = sorted({int(t) for t in thread_counts})
    if not counts or counts[0] < 1:
        raise ConfigurationError("thread counts must be >= 1")
    if image is None:
        image = np.random.default_rng(seed).random((1, *graph.input_shape), dtype=np.float32)
    report = BenchReport(file_size_bytes=len(fileformat.dumps(graph)), dtype=weight_dtype(graph))
    for t in counts:
        with InferenceEngine(t) as eng:
            for _ in range(warmup):
                eng.infer(graph, image)
            times = np.array([eng.infer(graph, image)[1] for _ in range(iters)])
        report.records.append(BenchRecord(t, float(times.mean()), float(np.percentile(times, 50)),
                                          float(np.percentile(times, 95)), iters))
    return report
