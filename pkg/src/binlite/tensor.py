"""Dense array primitives: construction, matmul, convolution and pooling kernels.

Tensors are plain ``numpy.ndarray`` values in channels-last layout
(``[h, w, c]`` for one image, ``[n, h, w, c]`` for a batch). Every kernel
accepts either rank and returns the same rank it was given. Training and
inference run in float32; float64 exists for gradient-check oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
MAX_RANK = 4


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ShapeError(f"unknown dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dt}")
    return dt


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"every extent must be >= 1, got shape {shape}")
    return shape


def fill(shape, dtype="f32", value=0.0) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=_resolve_dtype(dtype))


def zeros_like(t: np.ndarray) -> np.ndarray:
    check_shape(t.shape)
    return np.zeros_like(t)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "same"
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.in_channels, self.out_channels) < 1:
            raise ShapeError(f"conv extents must be positive: {self}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def pads(self, h: int, w: int):
        """Return ``((top, bottom), (left, right))`` zero padding for an ``h x w`` input."""
        if self.padding == "valid":
            return (0, 0), (0, 0)
        out = []
        for size, k in ((h, self.kernel_h), (w, self.kernel_w)):
            o = math.ceil(size / self.stride)
            total = max((o - 1) * self.stride + k - size, 0)
            # odd totals put the extra row/column on the bottom/right
            out.append((total // 2, total - total // 2))
        return tuple(out)

    def output_hw(self, h: int, w: int):
        (pt, pb), (pl, pr) = self.pads(h, w)
        oh = (h + pt + pb - self.kernel_h) // self.stride + 1
        ow = (w + pl + pr - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output extent < 1 for input {h}x{w} and {self}")
        return oh, ow


def _batched(x: np.ndarray, name="input"):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be [h,w,c] or [n,h,w,c], got shape {x.shape}")


def _window(xp, i, j, oh, ow, stride):
    return xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :]


def _pad(x, pads):
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def conv2d(input: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
           bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Cross-correlate ``input`` with ``kernels`` (``[kh,kw,c_in,c_out]``) and add ``bias``."""
    x, squeeze = _batched(input)
    kh, kw, cin, cout = spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels
    if kernels.shape != (kh, kw, cin, cout):
        raise ShapeError(f"kernel shape {kernels.shape} does not match {spec}")
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels, spec expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    n, h, w, _ = x.shape
    oh, ow = spec.output_hw(h, w)
    xp = _pad(x, spec.pads(h, w))
    s = spec.stride
    if kh == kw == 1 and s == 1:
        out = (x.reshape(-1, cin) @ kernels[0, 0]).reshape(n, oh, ow, cout)
    else:
        out = np.zeros((n, oh, ow, cout), dtype=np.result_type(x, kernels))
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, oh, ow, s) @ kernels[i, j]
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def conv2d_backward(input: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
                    upstream: np.ndarray):
    """Gradients ``(d_input, d_kernels, d_bias)`` of a loss w.r.t. conv2d's arguments."""
    x, squeeze = _batched(input)
    g, _ = _batched(upstream, "upstream")
    kh, kw, cin, cout = kernels.shape
    n, h, w, _ = x.shape
    oh, ow = g.shape[1:3]
    s = spec.stride
    g2 = g.reshape(-1, cout)
    dk = np.empty_like(kernels)
    if kh == kw == 1 and s == 1:
        dk[0, 0] = x.reshape(-1, cin).T @ g2
        dx = (g2 @ kernels[0, 0].T).reshape(x.shape)
    else:
        pads = spec.pads(h, w)
        xp = _pad(x, pads)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = _window(xp, i, j, oh, ow, s)
                dk[i, j] = xs.reshape(-1, cin).T @ g2
                _window(dxp, i, j, oh, ow, s)[...] += g @ kernels[i, j].T
        (pt, _), (pl, _) = pads
        dx = dxp[:, pt:pt + h, pl:pl + w, :]
    db = g2.sum(axis=0)
    return (dx[0] if squeeze else dx), dk, db


def depthwise_conv2d(input: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
                     bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Convolve each channel with its own ``[kh,kw]`` slice of ``kernels`` (``[kh,kw,c]``)."""
    x, squeeze = _batched(input)
    kh, kw, c = spec.kernel_h, spec.kernel_w, spec.in_channels
    if spec.out_channels != c:
        raise ShapeError("depthwise conv needs out_channels == in_channels")
    if kernels.shape != (kh, kw, c):
        raise ShapeError(f"kernel shape {kernels.shape} does not match {spec}")
    if x.shape[3] != c:
        raise ShapeError(f"input has {x.shape[3]} channels, spec expects {c}")
    n, h, w, _ = x.shape
    oh, ow = spec.output_hw(h, w)
    xp = _pad(x, spec.pads(h, w))
    out = np.zeros((n, oh, ow, c), dtype=np.result_type(x, kernels))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, oh, ow, spec.stride) * kernels[i, j]
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def depthwise_conv2d_backward(input: np.ndarray, spec: ConvSpec, kernels: np.ndarray,
                              upstream: np.ndarray):
    x, squeeze = _batched(input)
    g, _ = _batched(upstream, "upstream")
    kh, kw, c = kernels.shape
    n, h, w, _ = x.shape
    oh, ow = g.shape[1:3]
    pads = spec.pads(h, w)
    xp = _pad(x, pads)
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernels)
    for i in range(kh):
        for j in range(kw):
            xs = _window(xp, i, j, oh, ow, spec.stride)
            dk[i, j] = np.einsum("nhwc,nhwc->c", xs, g)
            _window(dxp, i, j, oh, ow, spec.stride)[...] += g * kernels[i, j]
    (pt, _), (pl, _) = pads
    dx = dxp[:, pt:pt + h, pl:pl + w, :]
    db = g.sum(axis=(0, 1, 2))
    return (dx[0] if squeeze else dx), dk, db


def pool_output_hw(h: int, w: int, window: int, stride: int):
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent {h}x{w}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def pool2d(input: np.ndarray, window: int, stride: int, mode: str = "max") -> np.ndarray:
    """Max or mean pooling over ``window x window`` patches, channels independent."""
    x, squeeze = _batched(input)
    n, h, w, c = x.shape
    oh, ow = pool_output_hw(h, w, window, stride)
    if mode == "max":
        out = None
        for i in range(window):
            for j in range(window):
                xs = _window(x, i, j, oh, ow, stride)
                out = xs.copy() if out is None else np.maximum(out, xs)
    elif mode == "mean":
        out = np.zeros((n, oh, ow, c), dtype=x.dtype)
        for i in range(window):
            for j in range(window):
                out += _window(x, i, j, oh, ow, stride)
        out /= window * window
    else:
        raise ShapeError(f"pool mode must be 'max' or 'mean', got {mode!r}")
    return out[0] if squeeze else out


def pool2d_backward(input: np.ndarray, output: np.ndarray, window: int, stride: int,
                    mode: str, upstream: np.ndarray) -> np.ndarray:
    x, squeeze = _batched(input)
    y, _ = _batched(output, "output")
    g, _ = _batched(upstream, "upstream")
    oh, ow = g.shape[1:3]
    dx = np.zeros_like(x)
    if mode == "max":
        # ties route the gradient to the first maximal element in scan order
        taken = np.zeros(g.shape, dtype=bool)
        for i in range(window):
            for j in range(window):
                hit = (_window(x, i, j, oh, ow, stride) == y) & ~taken
                taken |= hit
                _window(dx, i, j, oh, ow, stride)[...] += g * hit
    else:
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                _window(dx, i, j, oh, ow, stride)[...] += share
    return dx[0] if squeeze else dx


@dataclass(eq=False)
class QuantTensor:
    """A quantized weight payload with an optional float32 dequantization cache.

    ``dtype`` is ``"f16"`` or ``"i8"``. For ``i8`` the real value is
    ``scale * payload`` with payload values in ``[-127, 127]``.
    """

    dtype: str
    shape: tuple
    payload: np.ndarray
    scale: float = 1.0
    cache: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def dequantize(self) -> np.ndarray:
        if self.dtype == "f16":
            return self.payload.astype(np.float32)
        return self.payload.astype(np.float32) * np.float32(self.scale)

    def value(self) -> np.ndarray:
        """Cached float32 value if present, otherwise a fresh dequantization."""
        return self.cache if self.cache is not None else self.dequantize()
