"""Binary container for CompiledModel.

Layout (all little-endian)::

    u32 magic 0x424E4E43, u16 version
    u32 input_width, u32 classes, format io, 32-byte sha256 of the source model
    u32 len + UTF-8 JSON (plan and per-layer precisions)
    u32 layer count, then per layer: u8 kind tag, u32 payload length, payload

A format descriptor is four bytes: T, I, rounding code, overflow code.
Binary weights are stored as packed u64 rows, ternary weights as 2-bit
codes (32 per u64), thresholds and all other raw values as i64.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .. import fixedpoint as fxp
from ..fixedpoint import FixedPointFormat
from ..kernels import ops
from .layers import (
    FixedActivation,
    FixedBatchNorm,
    FixedDense,
    LutSoftmaxLayer,
    PackedBinaryDense,
    TernaryDense,
    ThresholdLayer,
    TwoThresholdLayer,
)
from .passes import CompiledModel, LayerPrecision

MAGIC = 0x424E4E43
VERSION = 1

_TAGS = {
    PackedBinaryDense: 1, TernaryDense: 2, FixedDense: 3, ThresholdLayer: 4,
    TwoThresholdLayer: 5, FixedBatchNorm: 6, FixedActivation: 7, LutSoftmaxLayer: 8,
}
_CLASSES = {v: k for k, v in _TAGS.items()}
_ROUND = [fxp.NEAREST_EVEN, fxp.TRUNCATE]
_OVF = [fxp.SATURATE, fxp.WRAP]
_SOFTMAX_MODES = ["max_subtract", "pairwise"]


class SerializationError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def fmt(self, f: FixedPointFormat | None):
        if f is None:
            self.pack("4B", 0, 0, 0, 0)
        else:
            self.pack("4B", f.total_bits, f.integer_bits, _ROUND.index(f.rounding),
                      _OVF.index(f.overflow))

    def array(self, a, dtype: str):
        self.buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def blob(self, b: bytes):
        self.pack("I", len(b))
        self.buf.write(b)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise SerializationError(f"truncated data at offset {self.pos}")
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def fmt(self) -> FixedPointFormat | None:
        t, i, r, o = self.unpack("4B")
        if t == 0:
            return None
        try:
            return FixedPointFormat(t, i, _ROUND[r], _OVF[o])
        except (IndexError, fxp.FormatError) as exc:
            raise SerializationError(f"bad format descriptor before offset {self.pos}") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise SerializationError(f"truncated array at offset {self.pos}")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return out

    def blob(self) -> bytes:
        n = self.unpack("I")
        if self.pos + n > len(self.data):
            raise SerializationError(f"truncated blob at offset {self.pos}")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out


def _write_int_dense(w: _Writer, layer) -> None:
    w.pack("IIBiBHi", layer.n_in, layer.n_out, layer.input_kind == "pm1", layer.input_frac,
           layer.emit == "fixed", layer.acc_bits, layer.source)
    w.fmt(layer.out_fmt)
    if layer.emit == "fixed":
        w.pack("i", layer.bias_frac)
        w.array(layer.bias_raw, "<i8")
    if isinstance(layer, PackedBinaryDense):
        w.array(layer.words, "<u8")
    else:
        w.array(ops.encode_ternary(layer.codes).words, "<u8")


def _read_int_dense(r: _Reader, cls):
    n_in, n_out, pm1, in_frac, fixed, acc_bits, source = r.unpack("IIBiBHi")
    out_fmt = r.fmt()
    kw = dict(n_in=n_in, n_out=n_out, input_kind="pm1" if pm1 else "int", input_frac=in_frac,
              emit="fixed" if fixed else "acc", acc_bits=acc_bits, source=source, out_fmt=out_fmt)
    if fixed:
        kw["bias_frac"] = r.unpack("i")
        kw["bias_raw"] = r.array("<i8", n_out)
    if cls is PackedBinaryDense:
        words = r.array("<u8", n_out * ((n_in + 63) // 64)).reshape(n_out, -1)
        return PackedBinaryDense(words=words.astype(np.uint64), **kw)
    words = r.array("<u8", n_out * ((n_in + 31) // 32)).reshape(n_out, -1)
    try:
        codes = ops.decode_ternary(words, n_in)
    except ValueError as exc:
        raise SerializationError(str(exc)) from exc
    return TernaryDense(codes=codes, **kw)


def _write_layer(w: _Writer, layer) -> None:
    if isinstance(layer, (PackedBinaryDense, TernaryDense)):
        _write_int_dense(w, layer)
    elif isinstance(layer, FixedDense):
        w.pack("IIiiHi", layer.n_in, layer.n_out, layer.weight_frac, layer.bias_frac,
               layer.acc_bits, layer.source)
        w.fmt(layer.out_fmt)
        w.array(layer.weights_raw, "<i8")
        w.array(layer.bias_raw, "<i8")
    elif isinstance(layer, (ThresholdLayer, TwoThresholdLayer)):
        w.pack("Ii", layer.width, layer.source)
        w.array(layer.polarity, "<i1")
        w.array(layer.constant_mask, "<u1")
        w.array(layer.constant_value, "<i1")
        if isinstance(layer, ThresholdLayer):
            w.array(layer.thresholds, "<i8")
        else:
            w.array(layer.lower, "<i8")
            w.array(layer.upper, "<i8")
    elif isinstance(layer, FixedBatchNorm):
        w.pack("Ii", len(layer.scale_raw), layer.source)
        w.fmt(layer.param_fmt)
        w.fmt(layer.out_fmt)
        w.array(layer.scale_raw, "<i8")
        w.array(layer.shift_raw, "<i8")
    elif isinstance(layer, FixedActivation):
        w.blob(layer.activation.encode("ascii"))
        w.pack("di", layer.y_max, layer.source)
        w.fmt(layer.out_fmt)
    elif isinstance(layer, LutSoftmaxLayer):
        lut = layer.lut
        w.fmt(lut.table_fmt)
        w.fmt(lut.inv_fmt)
        w.fmt(lut.out_fmt)
        w.pack("IdBdi", lut.table_size, lut.x_min, _SOFTMAX_MODES.index(lut.mode),
               lut.inv_range, layer.source)
    else:
        raise SerializationError(f"cannot serialize layer of type {type(layer).__name__}")


def _read_layer(r: _Reader, cls):
    if cls in (PackedBinaryDense, TernaryDense):
        return _read_int_dense(r, cls)
    if cls is FixedDense:
        n_in, n_out, wf, bf, acc_bits, source = r.unpack("IIiiHi")
        out_fmt = r.fmt()
        wr = r.array("<i8", n_in * n_out).reshape(n_out, n_in)
        br = r.array("<i8", n_out)
        return FixedDense(n_in, n_out, wr, wf, br, bf, out_fmt, acc_bits, source)
    if cls in (ThresholdLayer, TwoThresholdLayer):
        n, source = r.unpack("Ii")
        pol = r.array("<i1", n)
        mask = r.array("<u1", n).astype(bool)
        val = r.array("<i1", n)
        if cls is ThresholdLayer:
            return ThresholdLayer(r.array("<i8", n), pol, mask, val, source)
        lower = r.array("<i8", n)
        return TwoThresholdLayer(lower, r.array("<i8", n), pol, mask, val, source)
    if cls is FixedBatchNorm:
        n, source = r.unpack("Ii")
        pf, of = r.fmt(), r.fmt()
        return FixedBatchNorm(r.array("<i8", n), r.array("<i8", n), pf, of, source)
    if cls is FixedActivation:
        act = r.blob().decode("ascii")
        y_max, source = r.unpack("di")
        return FixedActivation(act, y_max, r.fmt(), source)
    tf, inv, of = r.fmt(), r.fmt(), r.fmt()
    size, x_min, mode, inv_range, source = r.unpack("IdBdi")
    lut = ops.LutSoftmax(tf, inv, of, table_size=size, x_min=x_min,
                         mode=_SOFTMAX_MODES[mode], inv_range=inv_range)
    return LutSoftmaxLayer(lut, source)


def _precision_to_dict(p: LayerPrecision) -> dict:
    return {"index": p.index, "kind": p.kind,
            "out_format": str(p.out_format) if p.out_format is not None else None,
            "out_bits": p.out_bits, "acc_bits": p.acc_bits, "folded_into": p.folded_into,
            "alloc": list(p.alloc) if p.alloc is not None else None}


def _precision_from_dict(d: dict) -> LayerPrecision:
    fmt = fxp.parse_format(d["out_format"]) if d["out_format"] else None
    return LayerPrecision(d["index"], d["kind"], fmt, d["out_bits"], d["acc_bits"],
                          d["folded_into"], tuple(d["alloc"]) if d.get("alloc") else None)


def to_bytes(model: CompiledModel) -> bytes:
    w = _Writer()
    w.pack("IH", MAGIC, VERSION)
    w.pack("II", model.input_width, model.classes)
    w.fmt(model.io_format)
    if len(model.source_hash) != 32:
        raise SerializationError("source hash must be 32 bytes")
    w.buf.write(model.source_hash)
    meta = {"plan": model.plan, "precisions": [_precision_to_dict(p) for p in model.precisions]}
    w.blob(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    w.pack("I", len(model.layers))
    for layer in model.layers:
        body = _Writer()
        _write_layer(body, layer)
        payload = body.getvalue()
        w.pack("BI", _TAGS[type(layer)], len(payload))
        w.buf.write(payload)
    return w.getvalue()


def from_bytes(data: bytes) -> CompiledModel:
    r = _Reader(data)
    magic, version = r.unpack("IH")
    if magic != MAGIC:
        raise SerializationError(f"bad magic 0x{magic:08X} at offset 0")
    if version != VERSION:
        raise SerializationError(f"unsupported version {version} at offset 4")
    input_width, classes = r.unpack("II")
    io_fmt = r.fmt()
    if r.pos + 32 > len(data):
        raise SerializationError(f"truncated data at offset {r.pos}")
    source_hash = bytes(r.data[r.pos:r.pos + 32])
    r.pos += 32
    meta = json.loads(r.blob().decode("utf-8"))
    layers = []
    for _ in range(r.unpack("I")):
        tag, length = r.unpack("BI")
        if tag not in _CLASSES:
            raise SerializationError(f"unknown layer tag {tag} at offset {r.pos - 5}")
        start = r.pos
        layers.append(_read_layer(r, _CLASSES[tag]))
        if r.pos - start != length:
            raise SerializationError(f"layer section length mismatch at offset {start}")
    if r.pos != len(data):
        raise SerializationError(f"trailing bytes at offset {r.pos}")
    precisions = tuple(_precision_from_dict(d) for d in meta["precisions"])
    return CompiledModel(input_width, classes, io_fmt, tuple(layers), precisions, source_hash,
                         meta["plan"])


def save_compiled(model: CompiledModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_compiled(path) -> CompiledModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
