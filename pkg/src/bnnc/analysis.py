"""Per-layer range profiling and a pre-synthesis FPGA cost model.

The cost model is a heuristic surrogate: it ranks designs and reproduces the
qualitative DSP/II trade-off, it does not predict synthesis percentages.
Coefficients live in ``data/cost_model.json``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from .compiler import CompiledModel, QuantPlan, Signal, assign_precision
from .compiler.layers import (
    FixedActivation,
    FixedBatchNorm,
    FixedDense,
    LutSoftmaxLayer,
    PackedBinaryDense,
    TernaryDense,
    ThresholdLayer,
    TwoThresholdLayer,
)
from .fixedpoint import FixedPointFormat, quantize_array, representable_range
from .nn import Activation, BatchNormLayer, DenseLayer, ModelGraph, model_forward


# -- profiling ---------------------------------------------------------------

@dataclass
class LayerProfile:
    layer: int
    kind: str
    min: float
    q1: float
    median: float
    q3: float
    max: float
    alloc_lo: float
    alloc_hi: float
    overflow_frac: float


def quartiles(samples) -> tuple[float, float, float, float, float]:
    """min, q1, median, q3, max with linear interpolation between order statistics."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("quartiles of an empty sample")
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return tuple(float(v) for v in q)


def overflow_fraction(samples, fmt_or_range) -> float:
    """Fraction of samples strictly outside the representable range."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("overflow_fraction of an empty sample")
    if isinstance(fmt_or_range, FixedPointFormat):
        lo, hi = representable_range(fmt_or_range)
    else:
        lo, hi = fmt_or_range
    return float(np.mean((x < lo) | (x > hi)))


def _layer_kind(layer) -> str:
    if isinstance(layer, DenseLayer):
        return f"dense_{layer.weight_mode}"
    if isinstance(layer, BatchNormLayer):
        return "batchnorm"
    if isinstance(layer, Activation):
        return layer.kind
    return layer.kind


def _make_profile(idx, kind, samples, alloc) -> LayerProfile:
    lo, hi = alloc if alloc is not None else (-math.inf, math.inf)
    return LayerProfile(idx, kind, *quartiles(samples), lo, hi, overflow_fraction(samples, (lo, hi)))


def profile(model, plan: QuantPlan | None, calibration) -> list[LayerProfile]:
    """Output-range statistics of every layer over a calibration set.

    For a ModelGraph the float outputs are compared with the range the plan
    allocates to each layer, which is what exposes overflow.  For a
    CompiledModel the lowered layers' own (already saturated) outputs are
    profiled.  Layers folded into a threshold are never materialized and get
    an unbounded allocation.
    """
    X = np.atleast_2d(np.asarray(calibration, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if isinstance(model, CompiledModel):
        return _profile_compiled(model, X)
    plan = plan or QuantPlan()
    _, outs = model_forward(model, X, trace=True)
    alloc = {p.index: p.alloc for p in assign_precision(model, plan)}
    return [_make_profile(i, _layer_kind(l), outs[i], alloc.get(i))
            for i, l in enumerate(model.layers)]


def _compiled_alloc(layer, sig: Signal):
    if isinstance(layer, (ThresholdLayer, TwoThresholdLayer)):
        return (-1.0, 1.0)
    fmt = getattr(layer, "out_fmt", None)
    if isinstance(layer, LutSoftmaxLayer):
        fmt = layer.lut.out_fmt
    if fmt is not None:
        return representable_range(fmt)
    half = 1 << (layer.acc_bits - 1)
    return (math.ldexp(-half, -sig.frac), math.ldexp(half - 1, -sig.frac))


def _profile_compiled(model: CompiledModel, X: np.ndarray) -> list[LayerProfile]:
    sig = Signal(quantize_array(X, model.io_format), model.io_format.frac_bits, "fixed")
    out = []
    for i, layer in enumerate(model.layers):
        sig = layer.execute(sig)
        real = sig.raw.astype(np.float64) if sig.kind in ("pm1", "ternary") else sig.real
        out.append(_make_profile(i, layer.kind, real, _compiled_alloc(layer, sig)))
    return out


PROFILE_COLUMNS = ["layer", "kind", "min", "q1", "median", "q3", "max",
                   "alloc_lo", "alloc_hi", "overflow_frac"]


def write_profile_csv(profiles, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_COLUMNS)
        for p in profiles:
            w.writerow([getattr(p, c) for c in PROFILE_COLUMNS])


def write_profile_json(profiles, path) -> None:
    def clean(v):
        return None if isinstance(v, float) and math.isinf(v) else v

    rows = [{k: clean(v) for k, v in asdict(p).items()} for p in profiles]
    with open(path, "w") as fh:
        json.dump({"layers": rows}, fh, indent=2)


# -- cost model --------------------------------------------------------------

def load_cost_config(path=None) -> dict:
    if path is None:
        text = resources.files("bnnc").joinpath("data/cost_model.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    cfg = json.loads(text)
    cfg.pop("_doc", None)
    return cfg


@dataclass
class ResourceEstimate:
    ii: int
    dsp_count: int
    lut_score: float
    ff_score: float
    bram_score: int
    latency_cycles: int
    latency_ns: float
    fixed_mults: int


def _log2c(n: int) -> int:
    return max(1, math.ceil(math.log2(max(n, 2))))


def _out_bits(layer, in_bits: int) -> int:
    if isinstance(layer, ThresholdLayer):
        return 1
    if isinstance(layer, TwoThresholdLayer):
        return 2
    if isinstance(layer, LutSoftmaxLayer):
        return layer.lut.out_fmt.total_bits
    fmt = getattr(layer, "out_fmt", None)
    return fmt.total_bits if fmt is not None else layer.acc_bits


def estimate_resources(compiled: CompiledModel, ii: int, config: dict | None = None
                       ) -> ResourceEstimate:
    """Heuristic resource/latency estimate at initiation interval ``ii``.

    A fixed-point multiply takes a DSP when its narrower operand is wider
    than ``dsp_operand_bits``; narrower ones are built from LUTs.  Every
    resource is shared ``ii`` ways, so instance counts are ``ceil(ops / ii)``.
    Latency is the sum of per-layer stage depths plus ``ii - 1`` cycles of
    input reuse.
    """
    if int(ii) != ii or ii < 1:
        raise ValueError(f"ii must be a positive integer, got {ii}")
    ii = int(ii)
    cfg = config or load_cost_config()
    dsp_mults = 0
    small_mult_cost = 0.0
    lut_ops = 0.0
    ff = 0.0
    bram = 0
    depth = 0
    cur_bits = compiled.io_format.total_bits  # width of the signal entering the layer
    for layer in compiled.layers:
        if isinstance(layer, (PackedBinaryDense, TernaryDense)):
            n = layer.n_in * layer.n_out
            if isinstance(layer, PackedBinaryDense) and layer.input_kind == "pm1":
                lut_ops += n * cfg["lut_per_xnor_bit"]
            else:
                lut_ops += n * cfg["lut_per_ternary_op"] * layer.acc_bits
            ff += layer.n_out * layer.acc_bits * cfg["ff_per_register_bit"]
            wbits = n * (1 if isinstance(layer, PackedBinaryDense) else 2)
            depth += _log2c(layer.n_in)
        elif isinstance(layer, FixedDense):
            n = layer.n_in * layer.n_out
            width = layer.out_fmt.total_bits
            if min(width, cur_bits) > cfg["dsp_operand_bits"]:
                dsp_mults += n
            else:
                small_mult_cost += n * width * cur_bits * cfg["lut_per_small_mult_bit2"]
            lut_ops += n * cfg["lut_per_adder_bit"] * min(layer.acc_bits, 2 * width)
            ff += layer.n_out * layer.acc_bits * cfg["ff_per_register_bit"]
            wbits = n * width
            depth += cfg["depth_mult"] + _log2c(layer.n_in)
        elif isinstance(layer, FixedBatchNorm):
            n = len(layer.scale_raw)
            width = layer.param_fmt.total_bits
            if min(width, cur_bits) > cfg["dsp_operand_bits"]:
                dsp_mults += n
            else:
                small_mult_cost += n * width * cur_bits * cfg["lut_per_small_mult_bit2"]
            ff += n * layer.out_fmt.total_bits * cfg["ff_per_register_bit"]
            wbits = 0
            depth += cfg["depth_bn"]
        elif isinstance(layer, (ThresholdLayer, TwoThresholdLayer)):
            n = layer.width * (1 if isinstance(layer, ThresholdLayer) else 2)
            lut_ops += n * cfg["lut_per_compare_bit"] * 16
            ff += layer.width * cfg["ff_per_register_bit"]
            wbits = 0
            depth += cfg["depth_threshold"]
        elif isinstance(layer, FixedActivation):
            wbits = 0
            depth += cfg["depth_activation"]
        elif isinstance(layer, LutSoftmaxLayer):
            lut_ops += cfg["lut_softmax"] * ii  # tables are not shared across reuse
            wbits = 0
            depth += cfg["depth_softmax"]
        else:  # pragma: no cover
            raise TypeError(f"unknown layer {type(layer).__name__}")
        cur_bits = _out_bits(layer, cur_bits)
        if wbits > cfg["bram_min_bits"]:
            bram += math.ceil(wbits / cfg["bram_block_bits"])
    dsp = math.ceil(dsp_mults / ii)
    lut = math.ceil((lut_ops + small_mult_cost) / ii)
    latency = int(depth + ii - 1)
    return ResourceEstimate(ii, dsp, float(lut), float(ff), bram, latency,
                            latency * 1000.0 / cfg["clock_mhz"], dsp_mults)


def ii_scan(compiled: CompiledModel, ii_list, config: dict | None = None) -> list[ResourceEstimate]:
    ii_list = list(ii_list)
    if not ii_list:
        raise ValueError("ii_list is empty")
    cfg = config or load_cost_config()
    return [estimate_resources(compiled, ii, cfg) for ii in sorted(ii_list)]


SCAN_COLUMNS = ["ii", "latency_ns", "dsp", "lut", "ff", "bram"]


def write_scan_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_COLUMNS)
        for e in curve:
            w.writerow([e.ii, e.latency_ns, e.dsp_count, e.lut_score, e.ff_score, e.bram_score])
