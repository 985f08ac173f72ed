"""Layer forward/backward passes and the finite-difference gradient oracle.

A layer is a ``LayerSpec`` (what it is) plus a ``LayerState`` (its tensors).
All layers take batched input: ``[n, h, w, c]`` for spatial kinds and
``[n, features]`` for ``dense``/``softmax``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, PrecisionError, ShapeError, StateError
from .tensor import ConvSpec, QuantTensor

KINDS = (
    "conv", "depthwise_conv", "pointwise_conv", "batchnorm", "relu", "relu6",
    "dense", "dropout", "maxpool", "meanpool", "flatten", "softmax", "residual_add",
)
PARAMETRIC = ("conv", "depthwise_conv", "pointwise_conv", "batchnorm", "dense")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)
    trainable: bool = True
    group: str = "body"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not 0.0 <= self.hyper.get("rate", 0.5) < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1): {self.hyper}")
        if self.kind == "dense" and self.hyper.get("units", 1) < 1:
            raise ConfigurationError("dense units must be >= 1")


@dataclass
class LayerState:
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    cache: Optional[dict] = None


# -- constructors ---------------------------------------------------------

def conv(in_channels, out_channels, kernel=3, stride=1, padding="same", use_bias=True, **kw):
    return LayerSpec("conv", dict(kernel=kernel, stride=stride, padding=padding,
                                  in_channels=in_channels, out_channels=out_channels,
                                  use_bias=use_bias), **kw)


def depthwise_conv(channels, kernel=3, stride=1, padding="same", use_bias=False, **kw):
    return LayerSpec("depthwise_conv", dict(kernel=kernel, stride=stride, padding=padding,
                                            channels=channels, use_bias=use_bias), **kw)


def pointwise_conv(in_channels, out_channels, use_bias=False, **kw):
    return LayerSpec("pointwise_conv", dict(in_channels=in_channels, out_channels=out_channels,
                                            use_bias=use_bias), **kw)


def batchnorm(channels, eps=BN_EPS, momentum=BN_MOMENTUM, **kw):
    return LayerSpec("batchnorm", dict(channels=channels, eps=eps, momentum=momentum), **kw)


def dense(in_units, units, use_bias=True, **kw):
    return LayerSpec("dense", dict(in_units=in_units, units=units, use_bias=use_bias), **kw)


def dropout(rate, **kw):
    return LayerSpec("dropout", dict(rate=rate), **kw)


def maxpool(window=2, stride=2, **kw):
    return LayerSpec("maxpool", dict(window=window, stride=stride), **kw)


def meanpool(window=2, stride=2, global_pool=False, **kw):
    return LayerSpec("meanpool", dict(window=window, stride=stride, global_pool=global_pool), **kw)


def simple(kind, **kw):
    return LayerSpec(kind, {}, **kw)


def residual_add(source, **kw):
    """Add the input of layer ``source`` (an index in the enclosing model) to this layer's input."""
    return LayerSpec("residual_add", dict(source=source), **kw)


# -- shapes and initialization --------------------------------------------

def conv_spec(spec: LayerSpec) -> ConvSpec:
    h = spec.hyper
    if spec.kind == "conv":
        return ConvSpec(h["kernel"], h["kernel"], h["stride"], h["padding"],
                        h["in_channels"], h["out_channels"])
    if spec.kind == "depthwise_conv":
        return ConvSpec(h["kernel"], h["kernel"], h["stride"], h["padding"],
                        h["channels"], h["channels"])
    if spec.kind == "pointwise_conv":
        return ConvSpec(1, 1, 1, "valid", h["in_channels"], h["out_channels"])
    raise ConfigurationError(f"{spec.kind} is not a convolution")


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape for a per-sample input shape (no batch axis)."""
    k, h = spec.kind, spec.hyper
    in_shape = tuple(in_shape)
    if k in ("conv", "depthwise_conv", "pointwise_conv"):
        cs = conv_spec(spec)
        if len(in_shape) != 3 or in_shape[2] != cs.in_channels:
            raise ShapeError(f"{k} expects [h,w,{cs.in_channels}], got {in_shape}")
        return (*cs.output_hw(in_shape[0], in_shape[1]), cs.out_channels)
    if k in ("maxpool", "meanpool"):
        if len(in_shape) != 3:
            raise ShapeError(f"{k} expects [h,w,c], got {in_shape}")
        if h.get("global_pool"):
            return (1, 1, in_shape[2])
        return (*T.pool_output_hw(in_shape[0], in_shape[1], h["window"], h["stride"]), in_shape[2])
    if k == "batchnorm":
        if in_shape[-1] != h["channels"]:
            raise ShapeError(f"batchnorm over {h['channels']} channels got {in_shape}")
        return in_shape
    if k == "dense":
        if in_shape != (h["in_units"],):
            raise ShapeError(f"dense expects ({h['in_units']},), got {in_shape}")
        return (h["units"],)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "softmax" and len(in_shape) != 1:
        raise ShapeError(f"softmax expects a feature vector, got {in_shape}")
    return in_shape


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    w = rng.random(shape, dtype=np.float32) if dtype == np.float32 else rng.random(shape)
    w *= 2 * limit
    w -= limit
    return w.astype(dtype, copy=False)


def init_state(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> LayerState:
    """He-uniform weights, zero biases, unit gamma, zero beta, unit running variance."""
    k, h = spec.kind, spec.hyper
    st = LayerState()
    if k in ("conv", "depthwise_conv", "pointwise_conv", "dense"):
        if k == "conv":
            shape = (h["kernel"], h["kernel"], h["in_channels"], h["out_channels"])
            fan_in, nout = h["kernel"] ** 2 * h["in_channels"], h["out_channels"]
        elif k == "depthwise_conv":
            shape = (h["kernel"], h["kernel"], h["channels"])
            fan_in, nout = h["kernel"] ** 2, h["channels"]
        elif k == "pointwise_conv":
            shape = (1, 1, h["in_channels"], h["out_channels"])
            fan_in, nout = h["in_channels"], h["out_channels"]
        else:
            shape = (h["in_units"], h["units"])
            fan_in, nout = h["in_units"], h["units"]
        st.params["weight"] = _he_uniform(rng, shape, fan_in, dtype)
        if h.get("use_bias", True):
            st.params["bias"] = np.zeros(nout, dtype=dtype)
    elif k == "batchnorm":
        c = h["channels"]
        st.params["gamma"] = np.ones(c, dtype=dtype)
        st.params["beta"] = np.zeros(c, dtype=dtype)
        st.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        st.buffers["running_var"] = np.ones(c, dtype=dtype)
    return st


def param(state: LayerState, name: str):
    v = state.params.get(name)
    if isinstance(v, QuantTensor):
        return v.value()
    return v


# -- forward / backward -----------------------------------------------------

def forward(spec: LayerSpec, state: LayerState, x: np.ndarray, mode: str = "infer",
            rng: Optional[np.random.Generator] = None, skip: Optional[np.ndarray] = None):
    """Run one layer. ``mode`` is ``"train"`` or ``"infer"``.

    In train mode the state's cache is filled with what ``backward`` needs; in
    infer mode it is cleared. ``skip`` is the second operand of ``residual_add``.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    k, h = spec.kind, spec.hyper
    cache = {} if train else None

    if k in ("conv", "pointwise_conv"):
        _expect_rank(x, 4, k)
        out = T.conv2d(x, conv_spec(spec), param(state, "weight"), param(state, "bias"))
        if train:
            cache["x"] = x
    elif k == "depthwise_conv":
        _expect_rank(x, 4, k)
        out = T.depthwise_conv2d(x, conv_spec(spec), param(state, "weight"), param(state, "bias"))
        if train:
            cache["x"] = x
    elif k == "dense":
        _expect_rank(x, 2, k)
        w = param(state, "weight")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense expects {w.shape[0]} features, got {x.shape[1]}")
        out = x @ w
        b = param(state, "bias")
        if b is not None:
            out += b
        if train:
            cache["x"] = x
    elif k == "batchnorm":
        out = _bn_forward(spec, state, x, train, cache)
    elif k == "relu":
        out = np.maximum(x, 0)
        if train:
            cache["mask"] = x > 0
    elif k == "relu6":
        out = np.clip(x, 0, 6)
        if train:
            cache["mask"] = (x > 0) & (x < 6)
    elif k == "dropout":
        if train and rng is None:
            raise ConfigurationError("dropout in train mode needs an rng")
        rate = h["rate"]
        if train and rate > 0:
            keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
            keep /= x.dtype.type(1.0 - rate)
            out = x * keep
            cache["keep"] = keep
        else:
            out = x
            if train:
                cache["keep"] = None
    elif k in ("maxpool", "meanpool"):
        _expect_rank(x, 4, k)
        if h.get("global_pool"):
            out = x.mean(axis=(1, 2), keepdims=True)
        else:
            out = T.pool2d(x, h["window"], h["stride"], "max" if k == "maxpool" else "mean")
        if train:
            cache["x"], cache["y"] = x, out
    elif k == "flatten":
        out = x.reshape(x.shape[0], -1)
        if train:
            cache["shape"] = x.shape
    elif k == "softmax":
        _expect_rank(x, 2, k)
        z = np.exp(x - x.max(axis=1, keepdims=True))
        out = z / z.sum(axis=1, keepdims=True)
        if train:
            cache["y"] = out
    elif k == "residual_add":
        if skip is None or skip.shape != x.shape:
            got = None if skip is None else skip.shape
            raise ShapeError(f"residual_add needs two identical shapes, got {x.shape} and {got}")
        out = x + skip
    else:  # pragma: no cover - guarded by LayerSpec
        raise ConfigurationError(k)

    state.cache = cache
    return out


def _expect_rank(x, rank, kind):
    if x.ndim != rank:
        raise ShapeError(f"{kind} expects rank-{rank} batched input, got shape {x.shape}")


def _bn_forward(spec, state, x, train, cache):
    h = spec.hyper
    if x.shape[-1] != h["channels"]:
        raise ShapeError(f"batchnorm over {h['channels']} channels got input {x.shape}")
    eps = h.get("eps", BN_EPS)
    gamma, beta = param(state, "gamma"), param(state, "beta")
    axes = tuple(range(x.ndim - 1))
    if train and spec.trainable:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        m = h.get("momentum", BN_MOMENTUM)
        rm, rv = state.buffers["running_mean"], state.buffers["running_var"]
        state.buffers["running_mean"] = (m * rm + (1 - m) * mean).astype(rm.dtype)
        state.buffers["running_var"] = (m * rv + (1 - m) * var).astype(rv.dtype)
        cache.update(xhat=xhat, inv_std=inv_std, batch=True)
        return xhat * gamma + beta
    # inference, or a frozen layer: a fixed affine map from running statistics
    inv_std = 1.0 / np.sqrt(state.buffers["running_var"] + eps)
    scale = (gamma * inv_std).astype(x.dtype)
    shift = (beta - state.buffers["running_mean"] * scale).astype(x.dtype)
    if cache is not None:
        cache.update(scale=scale, batch=False)
    return x * scale + shift


def backward(spec: LayerSpec, state: LayerState, upstream: np.ndarray):
    """Return ``(input_grad, param_grads)`` for the last train-mode forward.

    Frozen layers propagate ``input_grad`` but report no parameter gradients.
    For ``residual_add`` the skip operand receives the same gradient as the input.
    """
    c = state.cache
    if c is None:
        raise StateError(f"{spec.kind}: backward needs a preceding train-mode forward")
    k, h = spec.kind, spec.hyper
    g = upstream
    grads = {}

    if k in ("conv", "pointwise_conv"):
        dx, dk, db = T.conv2d_backward(c["x"], conv_spec(spec), param(state, "weight"), g)
        grads["weight"] = dk
        if "bias" in state.params:
            grads["bias"] = db
    elif k == "depthwise_conv":
        dx, dk, db = T.depthwise_conv2d_backward(c["x"], conv_spec(spec), param(state, "weight"), g)
        grads["weight"] = dk
        if "bias" in state.params:
            grads["bias"] = db
    elif k == "dense":
        w = param(state, "weight")
        dx = g @ w.T
        grads["weight"] = c["x"].T @ g
        if "bias" in state.params:
            grads["bias"] = g.sum(axis=0)
    elif k == "batchnorm":
        if c["batch"]:
            xhat, inv_std = c["xhat"], c["inv_std"]
            axes = tuple(range(g.ndim - 1))
            n = g.size // g.shape[-1]
            grads["beta"] = g.sum(axis=axes)
            grads["gamma"] = (g * xhat).sum(axis=axes)
            dxhat = g * param(state, "gamma")
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes)
                                  - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            # frozen layer: only reached with trainable=False, so no parameter grads
            dx = g * c["scale"]
    elif k in ("relu", "relu6"):
        dx = g * c["mask"]
    elif k == "dropout":
        dx = g if c["keep"] is None else g * c["keep"]
    elif k in ("maxpool", "meanpool"):
        if h.get("global_pool"):
            x = c["x"]
            dx = np.broadcast_to(g / (x.shape[1] * x.shape[2]), x.shape).copy()
        else:
            dx = T.pool2d_backward(c["x"], c["y"], h["window"], h["stride"],
                                   "max" if k == "maxpool" else "mean", g)
    elif k == "flatten":
        dx = g.reshape(c["shape"])
    elif k == "softmax":
        y = c["y"]
        dx = y * (g - (g * y).sum(axis=1, keepdims=True))
    elif k == "residual_add":
        dx = g
    else:  # pragma: no cover
        raise ConfigurationError(k)

    if not spec.trainable:
        grads = {}
    return dx, grads


# -- gradient oracle --------------------------------------------------------

def grad_check(spec: LayerSpec, state: LayerState, input: np.ndarray, epsilon: float = 1e-5,
               skip: Optional[np.ndarray] = None, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar being differentiated is ``sum(output * R)`` for a fixed seeded
    Gaussian ``R`` (a plain sum would make softmax and batch-norm input
    gradients identically zero). Every input element (and ``skip`` element)
    and every trainable parameter element is perturbed by ``+-epsilon``.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-3)``.
    """
    tensors = [input] + ([skip] if skip is not None else [])
    tensors += [p for p in state.params.values()]
    for t in tensors:
        if not isinstance(t, np.ndarray) or t.dtype != np.float64:
            raise PrecisionError("grad_check needs float64 inputs and parameters")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigurationError(f"epsilon {epsilon} outside [1e-7, 1e-3]")

    work = LayerState(params=state.params, buffers=copy.deepcopy(state.buffers))
    saved = copy.deepcopy(state.buffers)
    x = input.copy()
    s = None if skip is None else skip.copy()

    def run():
        work.buffers = copy.deepcopy(saved)
        return forward(spec, work, x, "train", np.random.default_rng(seed), s)

    out = run()
    weights = np.random.default_rng(seed + 1).standard_normal(out.shape)
    dx, grads = backward(spec, work, weights)

    def f():
        return float((run() * weights).sum())

    def numeric(arr):
        num = np.empty_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            fp = f()
            flat[i] = old - epsilon
            fm = f()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * epsilon)
        return num

    def rel(a, n):
        return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)))

    worst = rel(dx, numeric(x))
    if s is not None:
        worst = max(worst, rel(dx, numeric(s)))
    if spec.trainable:
        originals = {name: p for name, p in state.params.items()}
        work.params = {name: p.copy() for name, p in originals.items()}
        for name, p in work.params.items():
            worst = max(worst, rel(grads[name], numeric(p)))
        work.params = originals
    return worst
