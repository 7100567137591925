"""Lowering passes: BN folding, accumulator sizing, precision assignment, compile."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import fixedpoint as fxp
from ..fixedpoint import FixedPointFormat, make_format
from ..kernels import ops
from ..nn import Activation, BatchNormLayer, DenseLayer, ModelGraph, model_to_dict
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


class CompileError(ValueError):
    def __init__(self, message: str, layer_index: int | None = None):
        prefix = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(prefix + message)
        self.layer_index = layer_index


class PrecisionConflictError(CompileError):
    pass


@dataclass
class QuantPlan:
    default: FixedPointFormat = field(default_factory=lambda: make_format(16, 6))
    io: FixedPointFormat | None = None  # defaults to ``default``
    overrides: dict = field(default_factory=dict)  # source layer index -> format
    softmax_lut: FixedPointFormat | None = None  # defaults to fixed<18,8>
    softmax_inv: FixedPointFormat | None = None  # defaults to the LUT format
    softmax_mode: str = "max_subtract"
    softmax_table_size: int = 1024
    drop_softmax: bool = False

    def __post_init__(self):
        if self.io is None:
            self.io = self.default
        if self.softmax_lut is None:
            self.softmax_lut = make_format(18, 8)
        if self.softmax_inv is None:
            self.softmax_inv = self.softmax_lut

    def to_dict(self) -> dict:
        return {"default": str(self.default), "io": str(self.io),
                "overrides": {str(k): str(v) for k, v in sorted(self.overrides.items())},
                "softmax_lut": str(self.softmax_lut), "softmax_inv": str(self.softmax_inv),
                "softmax_mode": self.softmax_mode, "softmax_table_size": self.softmax_table_size,
                "drop_softmax": self.drop_softmax}


# -- folding -----------------------------------------------------------------

def fold_bn_binary(bn: BatchNormLayer) -> ThresholdLayer:
    """Replace sign(BN(x)) by a per-node comparison of x against x0."""
    std = bn.std
    g = bn.gamma
    const = g == 0
    safe_g = np.where(const, 1.0, g)
    x0 = np.where(const, 0.0, bn.mu - bn.beta * std / safe_g)
    pol = np.where(g < 0, -1, 1).astype(np.int8)
    value = np.where(bn.beta >= 0, 1, -1).astype(np.int8)
    return ThresholdLayer(x0, pol, const, np.where(const, value, 0).astype(np.int8))


def fold_bn_ternary(bn: BatchNormLayer, t_a: float = 0.5) -> TwoThresholdLayer:
    """Replace ternary_tanh(BN(x)) by a window test on x."""
    if t_a <= 0:
        raise ValueError("t_a must be positive")
    std = bn.std
    g = bn.gamma
    const = g == 0
    safe_g = np.where(const, 1.0, g)
    at_pos = bn.mu + (t_a - bn.beta) * std / safe_g  # where y = +t_a
    at_neg = bn.mu + (-t_a - bn.beta) * std / safe_g  # where y = -t_a
    lower = np.where(const, 0.0, np.minimum(at_pos, at_neg))
    upper = np.where(const, 0.0, np.maximum(at_pos, at_neg))
    pol = np.where(g < 0, -1, 1).astype(np.int8)
    value = np.where(bn.beta > t_a, 1, np.where(bn.beta < -t_a, -1, 0)).astype(np.int8)
    return TwoThresholdLayer(lower, upper, pol, const, np.where(const, value, 0).astype(np.int8))


def threshold_on_grid(layer, scale_bits: int, offset, bound: int):
    """Move real thresholds onto the integer accumulator grid.

    The accumulator ``a`` relates to the real pre-BN value by
    ``x = a * 2**-scale_bits + offset``.  Rounding goes toward the side that
    keeps every integer accumulator's decision unchanged, and thresholds are
    clamped just outside ``[-bound, bound]``.
    """
    lim = float(bound + 1)

    def to_acc(t):
        return np.clip(np.ldexp(np.asarray(t, dtype=np.float64) - offset, scale_bits), -lim, lim)

    if isinstance(layer, ThresholdLayer):
        t = to_acc(layer.thresholds)
        t = np.where(layer.polarity > 0, np.ceil(t), np.floor(t)).astype(np.int64)
        return ThresholdLayer(t, layer.polarity, layer.constant_mask, layer.constant_value,
                              layer.source)
    lower = np.ceil(to_acc(layer.lower)).astype(np.int64)
    upper = np.floor(to_acc(layer.upper)).astype(np.int64)
    return TwoThresholdLayer(lower, upper, layer.polarity, layer.constant_mask,
                             layer.constant_value, layer.source)


def _with_source(layer, source):
    return type(layer)(**{**{k: getattr(layer, k) for k in layer.__dataclass_fields__},
                          "source": source})


# -- widths ------------------------------------------------------------------

def infer_accumulator_width(kind: str, fan_in: int, weight_mode: str = "binary",
                            input_magnitude: int = 1) -> int:
    """Signed bits holding every sum of ``fan_in`` products.

    ``input_magnitude`` is the largest absolute input value on the integer grid
    (1 for +-1 / ternary activations).  Weights of binary/ternary layers have
    magnitude 1.
    """
    if fan_in < 1:
        raise ValueError("fan_in must be at least 1")
    if kind != "dense":
        raise ValueError(f"accumulator width is defined for dense layers, not {kind!r}")
    if weight_mode not in ("binary", "ternary"):
        raise ValueError("structural accumulator sizing applies to binary/ternary weights")
    return _bits_for(fan_in * int(input_magnitude))


def _bits_for(bound: int) -> int:
    return math.ceil(math.log2(bound + 1)) + 1


# -- precision assignment ----------------------------------------------------

@dataclass
class LayerPrecision:
    index: int  # source layer index
    kind: str  # lowered kind, or "folded" for BN/activation merged into a threshold
    out_format: FixedPointFormat | None
    out_bits: int
    acc_bits: int | None = None
    folded_into: int | None = None
    alloc: tuple | None = None  # real range the hardware can hold; None if never materialized

    def describe(self) -> str:
        fmt = str(self.out_format) if self.out_format is not None else f"{self.out_bits}-bit"
        acc = f" acc={self.acc_bits}b" if self.acc_bits else ""
        return f"[{self.index}] {self.kind}: out={fmt}{acc}"


@dataclass
class _Step:
    kind: str
    sources: tuple
    in_kind: str
    in_frac: int
    in_mag: int
    width_in: int
    width_out: int
    out_fmt: FixedPointFormat | None = None
    acc_bits: int | None = None


def _plan_steps(model: ModelGraph, plan: QuantPlan) -> list[_Step]:
    layers = model.layers
    last = len(layers) - 1
    if plan.drop_softmax and layers and isinstance(layers[-1], Activation) \
            and layers[-1].kind == "softmax":
        last -= 1
    final = last

    for idx in plan.overrides:
        if not 0 <= idx < len(layers):
            raise PrecisionConflictError(f"override targets unknown layer {idx}")

    def fmt_for(i: int) -> FixedPointFormat:
        if i == final:
            if i in plan.overrides and plan.overrides[i] != plan.io:
                raise PrecisionConflictError(
                    f"override {plan.overrides[i]} conflicts with the io format {plan.io}", i)
            return plan.io
        return plan.overrides.get(i, plan.default)

    steps = []
    kind, frac, mag, width = "fixed", plan.io.frac_bits, 1 << (plan.io.total_bits - 1), \
        model.input_width
    i = 0
    while i <= last:
        layer = layers[i]
        if isinstance(layer, DenseLayer):
            if layer.weight_mode in ("binary", "ternary"):
                in_mag = 1 if kind in ("pm1", "ternary") else mag
                acc_bits = infer_accumulator_width("dense", layer.fan_in, layer.weight_mode, in_mag)
                fold = (i + 2 <= last and isinstance(layers[i + 1], BatchNormLayer)
                        and isinstance(layers[i + 2], Activation)
                        and layers[i + 2].kind in ("binary_tanh", "ternary_tanh"))
                lowered = "PackedBinaryDense" if layer.weight_mode == "binary" else "TernaryDense"
                if fold:
                    out_kind = "pm1" if layers[i + 2].kind == "binary_tanh" else "ternary"
                    for j in (i + 1, i + 2):
                        if j in plan.overrides:
                            raise PrecisionConflictError(
                                "layer is folded into a threshold and cannot take a format", j)
                    steps.append(_Step(lowered, (i,), kind, frac, in_mag, width,
                                       layer.fan_out, None, acc_bits))
                    steps.append(_Step("ThresholdLayer" if out_kind == "pm1"
                                       else "TwoThresholdLayer", (i + 1, i + 2), "acc",
                                       frac if kind == "fixed" else 0, 0, layer.fan_out,
                                       layer.fan_out))
                    kind, frac, mag = out_kind, 0, 1
                    width = layer.fan_out
                    i += 3
                    continue
                if i + 1 <= last and isinstance(layers[i + 1], BatchNormLayer):
                    # the exact accumulator feeds the BN, which absorbs the bias
                    if i in plan.overrides:
                        raise PrecisionConflictError(
                            "dense layer feeds a batch-norm through its exact accumulator", i)
                    steps.append(_Step(lowered, (i,), kind, frac, in_mag, width, layer.fan_out,
                                       None, acc_bits))
                    kind, frac = "acc", (frac if kind == "fixed" else 0)
                    mag, width = 1 << (acc_bits - 1), layer.fan_out
                    i += 1
                    continue
                fmt = fmt_for(i)
                steps.append(_Step(lowered, (i,), kind, frac, in_mag, width, layer.fan_out,
                                   fmt, acc_bits))
            else:
                fmt = fmt_for(i)
                x_mag = 1 if kind in ("pm1", "ternary") else mag
                w_mag = 1 << (fmt.total_bits - 1)
                steps.append(_Step("FixedDense", (i,), kind, frac, x_mag, width, layer.fan_out,
                                   fmt, _bits_for(layer.fan_in * w_mag * x_mag)))
            kind, frac, mag = "fixed", fmt.frac_bits, 1 << (fmt.total_bits - 1)
            width = layer.fan_out
        elif isinstance(layer, BatchNormLayer):
            fmt = fmt_for(i)
            steps.append(_Step("FixedBatchNorm", (i,), kind, frac, mag, width, width, fmt))
            kind, frac, mag = "fixed", fmt.frac_bits, 1 << (fmt.total_bits - 1)
        else:
            k = layer.kind
            if k == "softmax":
                if i != last:
                    raise CompileError("softmax is only supported as the final layer", i)
                fmt = fmt_for(i)
                steps.append(_Step("LutSoftmax", (i,), kind, frac, mag, width, width, fmt))
                kind, frac = "fixed", fmt.frac_bits
            elif k in ("binary_tanh", "ternary_tanh"):
                if i in plan.overrides:
                    raise PrecisionConflictError("threshold outputs are 1/2-bit codes", i)
                steps.append(_Step("ThresholdLayer" if k == "binary_tanh" else "TwoThresholdLayer",
                                   (i,), kind, frac, mag, width, width))
                kind, frac, mag = ("pm1" if k == "binary_tanh" else "ternary"), 0, 1
            else:
                fmt = fmt_for(i)
                steps.append(_Step("FixedActivation", (i,), kind, frac, mag, width, width, fmt))
                kind, frac, mag = "fixed", fmt.frac_bits, 1 << (fmt.total_bits - 1)
        i += 1
    return steps


def assign_precision(model: ModelGraph, plan: QuantPlan) -> list[LayerPrecision]:
    """Resolve one output precision per source layer.

    The network output is pinned to ``plan.io``; folded BN+tanh pairs emit 1-bit
    (binary) or 2-bit (ternary) codes; binary/ternary accumulators are sized
    structurally; everything else takes its override or the default format.
    """
    out = []
    for step in _plan_steps(model, plan):
        if step.kind in ("ThresholdLayer", "TwoThresholdLayer"):
            bits = 1 if step.kind == "ThresholdLayer" else 2
            for j, src in enumerate(step.sources):
                folded = len(step.sources) == 2 and j == 0
                out.append(LayerPrecision(src, "folded" if folded else step.kind, None, bits,
                                          folded_into=step.sources[-1] if folded else None,
                                          alloc=None if folded else (-1.0, 1.0)))
        else:
            fmt = step.out_fmt
            if fmt is not None:
                bits, alloc = fmt.total_bits, (fmt.lo, fmt.hi)
            else:
                bits = step.acc_bits
                half = 1 << (bits - 1)
                frac = step.in_frac if step.in_kind == "fixed" else 0
                alloc = (math.ldexp(-half, -frac), math.ldexp(half - 1, -frac))
            out.append(LayerPrecision(step.sources[0], step.kind, fmt, bits, step.acc_bits,
                                      alloc=alloc))
    return out


# -- compile -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CompiledModel:
    input_width: int
    classes: int
    io_format: FixedPointFormat
    layers: tuple
    precisions: tuple
    source_hash: bytes
    plan: dict = field(default_factory=dict)

    def kinds(self) -> list[str]:
        return [l.kind for l in self.layers]

    @property
    def accumulator_widths(self) -> list:
        return [getattr(l, "acc_bits", None) for l in self.layers]


def model_hash(model: ModelGraph) -> bytes:
    blob = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).digest()


def compile_model(model: ModelGraph, plan: QuantPlan | None = None) -> CompiledModel:
    plan = plan or QuantPlan()
    model.validate()
    layers = model.layers
    lowered = []
    prev_step = None
    for step in _plan_steps(model, plan):
        src = step.sources[0]
        layer = layers[src]
        if step.kind in ("PackedBinaryDense", "TernaryDense"):
            eff = layer.effective_weights().astype(np.int8)
            in_kind = "pm1" if step.in_kind == "pm1" and step.kind == "PackedBinaryDense" else "int"
            in_frac = step.in_frac if step.in_kind == "fixed" else 0
            common = dict(n_in=layer.fan_in, n_out=layer.fan_out, input_kind=in_kind,
                          input_frac=in_frac, acc_bits=step.acc_bits, source=src)
            if step.out_fmt is None:
                common.update(emit="acc")
            else:
                common.update(emit="fixed", bias_raw=fxp.quantize_array(layer.bias, step.out_fmt),
                              bias_frac=step.out_fmt.frac_bits, out_fmt=step.out_fmt)
            if step.kind == "PackedBinaryDense":
                lowered.append(PackedBinaryDense(words=ops.pack_matrix(eff), **common))
            else:
                lowered.append(TernaryDense(codes=np.ascontiguousarray(eff), **common))
        elif step.kind == "FixedDense":
            fmt = step.out_fmt
            lowered.append(FixedDense(layer.fan_in, layer.fan_out,
                                      fxp.quantize_array(layer.weights, fmt), fmt.frac_bits,
                                      fxp.quantize_array(layer.bias, fmt), fmt.frac_bits, fmt,
                                      step.acc_bits, src))
        elif step.kind in ("ThresholdLayer", "TwoThresholdLayer"):
            if len(step.sources) == 2:
                bn, act = layers[step.sources[0]], layers[step.sources[1]]
                real = fold_bn_binary(bn) if act.kind == "binary_tanh" else fold_bn_ternary(bn, act.t_a)
                dense = layers[step.sources[0] - 1]
                bound = dense.fan_in * prev_step.in_mag
                grid = threshold_on_grid(real, step.in_frac, dense.bias, bound)
            else:
                act = layer
                w = step.width_in
                if act.kind == "binary_tanh":
                    real = ThresholdLayer(np.zeros(w), np.ones(w, np.int8), np.zeros(w, bool),
                                          np.zeros(w, np.int8))
                else:
                    real = TwoThresholdLayer(np.full(w, -act.t_a), np.full(w, act.t_a),
                                             np.ones(w, np.int8), np.zeros(w, bool),
                                             np.zeros(w, np.int8))
                frac = step.in_frac if step.in_kind in ("fixed", "acc") else 0
                bound = step.in_mag if step.in_kind == "fixed" else 1
                grid = threshold_on_grid(real, frac, 0.0, bound)
            lowered.append(_with_source(grid, step.sources[-1]))
        elif step.kind == "FixedBatchNorm":
            fmt = step.out_fmt
            a, c = layer.scale_shift()
            if step.in_kind == "acc":
                c = c + a * layers[src - 1].bias
            lowered.append(FixedBatchNorm(fxp.quantize_array(a, fmt), fxp.quantize_array(c, fmt),
                                          fmt, fmt, src))
        elif step.kind == "FixedActivation":
            lowered.append(FixedActivation(layer.kind, layer.y_max, step.out_fmt, src))
        elif step.kind == "LutSoftmax":
            lut = ops.LutSoftmax(plan.softmax_lut, plan.softmax_inv, step.out_fmt,
                                 table_size=plan.softmax_table_size, mode=plan.softmax_mode)
            lowered.append(LutSoftmaxLayer(lut, src))
        else:  # pragma: no cover - _plan_steps only emits the kinds above
            raise CompileError(f"unsupported lowering {step.kind}", src)
        prev_step = step
    return CompiledModel(model.input_width, model.classes, plan.io, tuple(lowered),
                         tuple(assign_precision(model, plan)), model_hash(model), plan.to_dict())
