"""Sequential model graphs, the architecture presets and parameter bookkeeping."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .errors import ConfigurationError, ShapeError
from .layers import LayerSpec, LayerState
from .tensor import QuantTensor

PRESETS = ("scratch_cnn", "vgg16", "mobilenet_v2", "mobilenet_transfer")
DEFAULT_INPUT = (224, 224, 3)
NORMALIZATION = "rgb8 / 255 -> [0, 1], bilinear resize to input_shape"

SCRATCH_FILTERS = (32, 64, 128)
SCRATCH_DROPOUT = 0.5
HEAD_DROPOUT = 0.3
TRANSFER_HEAD = (2048, 1536)
VGG16_D = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
VGG_DENSE = (4096, 4096)
# (expansion, channels, repeats, first stride)
MOBILENET_V2_STAGES = (
    (1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
    (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1),
)
MOBILENET_STEM = 32
MOBILENET_FEATURES = 1280


@dataclass
class ModelGraph:
    specs: list
    states: list
    input_shape: tuple
    class_names: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    @property
    def layers(self):
        return list(zip(self.specs, self.states))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self):
        names = list(self.class_names)
        if not names or len(set(names)) != len(names) or names != sorted(names):
            raise ConfigurationError("class_names must be non-empty, unique and sorted")
        if len(self.specs) != len(self.states):
            raise ConfigurationError("one state per layer spec required")
        if not self.specs or self.specs[-1].kind != "softmax":
            raise ConfigurationError("final layer must be softmax")
        shape = self.input_shape
        shapes = [shape]
        for i, spec in enumerate(self.specs):
            if spec.kind == "residual_add":
                src = spec.hyper["source"]
                if not 0 <= src < i or shapes[src] != shape:
                    raise ShapeError(f"layer {i}: residual source {src} shape mismatch")
            shape = L.output_shape(spec, shape)
            shapes.append(shape)
        if shape != (len(names),):
            raise ShapeError(f"softmax width {shape} != {len(names)} classes")
        self.shapes = shapes

    @property
    def residual_sources(self) -> set:
        return {s.hyper["source"] for s in self.specs if s.kind == "residual_add"}

    def snapshot(self):
        """Deep copy of every parameter and buffer, for checkpoint restore."""
        return [(copy.deepcopy(st.params), copy.deepcopy(st.buffers)) for st in self.states]

    def restore(self, snap):
        for st, (params, buffers) in zip(self.states, snap):
            st.params = copy.deepcopy(params)
            st.buffers = copy.deepcopy(buffers)
            st.cache = None


@dataclass(frozen=True)
class ArchPreset:
    name: str
    width_multiplier: float = 1.0
    num_classes: int = 6

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.name!r}; choose from {PRESETS}")
        if not 0 < self.width_multiplier <= 1:
            raise ConfigurationError("width_multiplier must be in (0, 1]")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")


def scaled(channels: int, width: float) -> int:
    c = math.ceil(channels * width - 1e-9)
    if c < 1:
        raise ConfigurationError(f"width {width} leaves a layer with 0 channels")
    return c


def default_class_names(k: int) -> list:
    digits = len(str(k - 1))
    return [f"class_{i:0{digits}d}" for i in range(k)]


def _scratch(w, k):
    specs, cin = [], None
    cin = 3
    for f in SCRATCH_FILTERS:
        f = scaled(f, w)
        specs += [
            L.conv(cin, f), L.batchnorm(f), L.simple("relu"),
            L.conv(f, f), L.batchnorm(f), L.simple("relu"),
            L.meanpool(2, 2), L.dropout(SCRATCH_DROPOUT),
        ]
        cin = f
    return specs, [L.simple("flatten")]


def _vgg16(w, k):
    specs, cin = [], 3
    for item in VGG16_D:
        if item == "M":
            specs.append(L.maxpool(2, 2))
        else:
            c = scaled(item, w)
            specs += [L.conv(cin, c), L.simple("relu")]
            cin = c
    specs.append(L.simple("flatten"))
    return specs, []


def _mobilenet_body(w):
    stem = scaled(MOBILENET_STEM, w)
    specs = [L.conv(3, stem, kernel=3, stride=2, use_bias=False), L.batchnorm(stem), L.simple("relu6")]
    cin = stem
    for t, c, n, s in MOBILENET_V2_STAGES:
        cout = scaled(c, w)
        for r in range(n):
            stride = s if r == 0 else 1
            start = len(specs)
            hidden = cin * t
            if t != 1:
                specs += [L.pointwise_conv(cin, hidden), L.batchnorm(hidden), L.simple("relu6")]
            specs += [L.depthwise_conv(hidden, stride=stride), L.batchnorm(hidden), L.simple("relu6"),
                      L.pointwise_conv(hidden, cout), L.batchnorm(cout)]
            if stride == 1 and cin == cout:
                specs.append(L.residual_add(start))
            cin = cout
    feats = scaled(MOBILENET_FEATURES, w)
    specs += [L.pointwise_conv(cin, feats), L.batchnorm(feats), L.simple("relu6"),
              L.meanpool(global_pool=True), L.simple("flatten")]
    return specs, feats


def _flat_features(specs, input_shape):
    shape = tuple(input_shape)
    for s in specs:
        shape = L.output_shape(s, shape)
    return shape[0]


def build_preset(preset: ArchPreset, seed: int = 0, input_shape=DEFAULT_INPUT,
                 class_names: Optional[list] = None) -> ModelGraph:
    """Build one of the four architectures with seed-determined He-uniform weights."""
    w, k = preset.width_multiplier, preset.num_classes
    names = list(class_names) if class_names is not None else default_class_names(k)
    if len(names) != k:
        raise ConfigurationError(f"{len(names)} class names for {k} classes")
    meta = dict(arch=preset.name, width_multiplier=w, seed=int(seed),
                normalization=NORMALIZATION, dropout_rates={})

    if preset.name == "scratch_cnn":
        body, tail = _scratch(w, k)
        feats = _flat_features(body + tail, input_shape)
        head = tail + [L.dense(feats, k), L.simple("softmax")]
        meta["dropout_rates"] = {"block": SCRATCH_DROPOUT}
        meta["blocks"] = len(SCRATCH_FILTERS)
    elif preset.name == "vgg16":
        body, _ = _vgg16(w, k)
        feats = _flat_features(body, input_shape)
        d1, d2 = (scaled(d, w) for d in VGG_DENSE)
        head = [L.dense(feats, d1), L.simple("relu"), L.dropout(0.5),
                L.dense(d1, d2), L.simple("relu"), L.dropout(0.5),
                L.dense(d2, k), L.simple("softmax")]
        meta["dropout_rates"] = {"classifier": 0.5}
    else:
        body, feats = _mobilenet_body(w)
        if preset.name == "mobilenet_v2":
            head = [L.dense(feats, k), L.simple("softmax")]
        else:
            h1, h2 = (scaled(d, w) for d in TRANSFER_HEAD)
            head = [L.dense(feats, h1), L.batchnorm(h1), L.simple("relu"), L.dropout(HEAD_DROPOUT),
                    L.dense(h1, h2), L.batchnorm(h2), L.simple("relu"), L.dropout(HEAD_DROPOUT),
                    L.dense(h2, k), L.simple("softmax")]
            meta["dropout_rates"] = {"head": HEAD_DROPOUT}
            meta["head_widths"] = [h1, h2]

    for s in head:
        s.group = "head"
    specs = body + head
    rng = np.random.default_rng(seed)
    states = [L.init_state(s, rng) for s in specs]
    graph = ModelGraph(specs, states, tuple(input_shape), names, meta)
    if preset.name == "mobilenet_transfer":
        freeze(graph, "body")
    return graph


def freeze(graph: ModelGraph, selector: str) -> ModelGraph:
    """Set trainable flags: ``body`` freezes body layers, ``all`` everything, ``none`` nothing."""
    if selector not in ("body", "all", "none"):
        raise ConfigurationError(f"selector must be body/all/none, got {selector!r}")
    for spec in graph.specs:
        if selector == "none":
            spec.trainable = True
        elif selector == "all":
            spec.trainable = False
        else:
            spec.trainable = spec.group != "body"
    return graph


def _size(p) -> int:
    return p.size if isinstance(p, QuantTensor) else int(p.size)


def param_count(graph: ModelGraph, trainable_only: bool = False, group: Optional[str] = None,
                frozen_only: bool = False) -> int:
    """Exact parameter element count; batch-norm running statistics are not parameters."""
    total = 0
    for spec, st in graph.layers:
        if trainable_only and not spec.trainable:
            continue
        if frozen_only and spec.trainable:
            continue
        if group is not None and spec.group != group:
            continue
        total += sum(_size(p) for p in st.params.values())
    return total


# -- execution ----------------------------------------------------------------

def run_forward(graph: ModelGraph, x: np.ndarray, mode: str = "infer",
                rng: Optional[np.random.Generator] = None, stop: Optional[int] = None) -> np.ndarray:
    """Forward through layers ``[0, stop)`` (all layers by default)."""
    sources = graph.residual_sources
    saved = {}
    stop = len(graph.specs) if stop is None else stop
    for i in range(stop):
        spec, st = graph.specs[i], graph.states[i]
        if i in sources:
            saved[i] = x
        skip = saved[spec.hyper["source"]] if spec.kind == "residual_add" else None
        x = L.forward(spec, st, x, mode, rng, skip)
    return x


def run_backward(graph: ModelGraph, upstream: np.ndarray, start: Optional[int] = None) -> dict:
    """Backpropagate from layer ``start`` (inclusive) down to the lowest trainable layer.

    Returns ``{layer_index: {param_name: grad}}`` for trainable layers.
    """
    start = len(graph.specs) - 1 if start is None else start
    trainable = [i for i, (s, st) in enumerate(graph.layers) if s.trainable and st.params]
    if not trainable:
        return {}
    lowest = min(trainable)
    pending = {}
    out = {}
    g = upstream
    for i in range(start, lowest - 1, -1):
        spec, st = graph.specs[i], graph.states[i]
        if spec.kind == "residual_add":
            src = spec.hyper["source"]
            pending[src] = pending[src] + g if src in pending else g
        g, grads = L.backward(spec, st, g)
        if grads:
            out[i] = grads
        if i in pending:
            g = g + pending.pop(i)
    return out


def check_batch(graph: ModelGraph, batch: np.ndarray):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != graph.input_shape:
        raise ShapeError(f"expected batch [n,{','.join(map(str, graph.input_shape))}], got {batch.shape}")


def predict(graph: ModelGraph, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Inference-mode class probabilities ``[n, num_classes]``."""
    check_batch(graph, batch)
    batch = batch.astype(np.float32, copy=False)
    outs = [run_forward(graph, batch[i:i + chunk], "infer") for i in range(0, len(batch), chunk)]
    return np.concatenate(outs, axis=0)


def copy_body(dst: ModelGraph, src: ModelGraph):
    """Copy body-layer parameters and buffers from ``src`` into ``dst`` (same body layout)."""
    body = [i for i, s in enumerate(dst.specs) if s.group == "body"]
    for i in body:
        if i >= len(src.specs) or src.specs[i].kind != dst.specs[i].kind \
                or src.specs[i].hyper != dst.specs[i].hyper:
            raise ConfigurationError(f"backbone layer {i} does not match the target architecture")
        dst.states[i].params = {k: np.array(v, copy=True) for k, v in src.states[i].params.items()}
        dst.states[i].buffers = {k: np.array(v, copy=True) for k, v in src.states[i].buffers.items()}
