"""Binary model file format.

Layout (little-endian)::

    "BNLT"  u16 version=1  u16 flags
    u32 len + UTF-8 JSON metadata (arch, input_shape, class_names, seed, ...)
    u32 layer count, per layer: u8 kind tag, u32 len + JSON hyperparams, u8 trainable
    u32 tensor count, per tensor:
        u16 name len + name bytes, u8 dtype tag (0=f32, 1=f16, 2=i8), u8 rank,
        u32 extent * rank, [f32 scale if i8], raw payload
    u32 CRC32 of every preceding byte

Flags: bit 0 set when any tensor is f16, bit 1 when any tensor is i8.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib

import numpy as np

from . import layers as L
from .errors import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError
from .layers import LayerSpec, LayerState
from .model import ModelGraph
from .tensor import QuantTensor

MAGIC = b"BNLT"
VERSION = 1
FLAG_F16 = 1
FLAG_I8 = 2
TAG_F32, TAG_F16, TAG_I8 = 0, 1, 2
_NP = {TAG_F32: "<f4", TAG_F16: "<f2", TAG_I8: "i1"}


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_record(name: str, value) -> tuple[bytes, int]:
    if isinstance(value, QuantTensor):
        tag = TAG_F16 if value.dtype == "f16" else TAG_I8
        shape, payload = value.shape, value.payload
    else:
        tag, shape, payload = TAG_F32, value.shape, value
    raw = np.ascontiguousarray(payload, dtype=_NP[tag]).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    if tag == TAG_I8:
        head += struct.pack("<f", value.scale)
    return head + raw, tag


def dumps(graph: ModelGraph) -> bytes:
    meta = dict(graph.metadata)
    meta.update(input_shape=list(graph.input_shape), class_names=list(graph.class_names))
    body = io.BytesIO()
    mb = _json(meta)
    body.write(struct.pack("<I", len(mb)) + mb)
    body.write(struct.pack("<I", len(graph.specs)))
    for spec in graph.specs:
        hb = _json({"hyper": spec.hyper, "group": spec.group})
        body.write(struct.pack("<BI", L.KINDS.index(spec.kind), len(hb)) + hb)
        body.write(struct.pack("<B", int(spec.trainable)))
    records, flags = [], 0
    for i, st in enumerate(graph.states):
        for name, value in list(st.params.items()) + list(st.buffers.items()):
            rec, tag = _tensor_record(f"{i}.{name}", value)
            flags |= {TAG_F32: 0, TAG_F16: FLAG_F16, TAG_I8: FLAG_I8}[tag]
            records.append(rec)
    body.write(struct.pack("<I", len(records)))
    for rec in records:
        body.write(rec)
    blob = MAGIC + struct.pack("<HH", VERSION, flags) + body.getvalue()
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def save(graph: ModelGraph, path) -> int:
    """Write ``graph`` to ``path``; returns the file size in bytes."""
    blob = dumps(graph)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError("model file ends prematurely")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(data: bytes):
    r = _Reader(data, 8)
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    (nlayers,) = r.unpack("<I")
    specs = []
    for _ in range(nlayers):
        tag, n = r.unpack("<BI")
        if tag >= len(L.KINDS):
            raise ChecksumError(f"unknown layer kind tag {tag}")
        hb = json.loads(r.take(n).decode("utf-8"))
        (trainable,) = r.unpack("<B")
        specs.append(LayerSpec(L.KINDS[tag], hb["hyper"], bool(trainable), hb["group"]))
    (ntensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(ntensors):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        scale = r.unpack("<f")[0] if tag == TAG_I8 else 1.0
        if tag not in _NP:
            raise ChecksumError(f"unknown dtype tag {tag}")
        dt = np.dtype(_NP[tag])
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
        if tag == TAG_F32:
            tensors[name] = arr.astype(np.float32, copy=False)
        else:
            tensors[name] = QuantTensor("f16" if tag == TAG_F16 else "i8", tuple(shape),
                                        arr.astype(np.float16 if tag == TAG_F16 else np.int8, copy=False),
                                        float(np.float32(scale)))
    return meta, specs, tensors, r.pos


def loads(data: bytes) -> ModelGraph:
    if len(data) < 8 or data[:4] != MAGIC:
        if len(data) < 8 and data[:4] == MAGIC[:len(data)]:
            raise TruncatedFileError("model file shorter than its header")
        raise BadMagicError("not a binlite model file (bad magic)")
    version, _flags = struct.unpack("<HH", data[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, expected {VERSION}")
    if len(data) < 12:
        raise TruncatedFileError("model file shorter than its header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # distinguish a cut-off file from a corrupted one by trying to parse the structure
        try:
            _, _, _, end = _parse(data)
        except TruncatedFileError:
            raise
        except Exception:
            raise ChecksumError("model file checksum mismatch") from None
        if end > len(body):
            raise TruncatedFileError("model file ends prematurely")
        raise ChecksumError("model file checksum mismatch")
    meta, specs, tensors, end = _parse(body)
    if end != len(body):
        raise ChecksumError("trailing bytes before checksum")

    states = []
    for i, spec in enumerate(specs):
        st = LayerState()
        for key in ("weight", "bias", "gamma", "beta"):
            if f"{i}.{key}" in tensors:
                st.params[key] = tensors[f"{i}.{key}"]
        for key in ("running_mean", "running_var"):
            if f"{i}.{key}" in tensors:
                st.buffers[key] = tensors[f"{i}.{key}"]
        states.append(st)
    input_shape = tuple(meta.pop("input_shape"))
    class_names = meta.pop("class_names")
    return ModelGraph(specs, states, input_shape, class_names, meta)


def load(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return loads(fh.read())
