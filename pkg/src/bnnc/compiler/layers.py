"""Lowered layer types of a CompiledModel and how each one executes.

Values flow between layers as a :class:`Signal`: a batch of raw int64 values
plus the number of fractional bits and a tag saying what the integers mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .. import fixedpoint as fxp
from ..fixedpoint import FixedPointFormat
from ..kernels import ops


class Signal(NamedTuple):
    raw: np.ndarray  # (N, width) int64
    frac: int
    kind: str  # "fixed" | "acc" | "pm1" | "ternary"

    @property
    def real(self) -> np.ndarray:
        return fxp.to_real(self.raw, self.frac)


def _emit_fixed(acc: np.ndarray, frac: int, bias_raw, bias_frac: int,
                out_fmt: FixedPointFormat) -> Signal:
    f = max(frac, bias_frac)
    total = (acc << np.int64(f - frac)) + (np.asarray(bias_raw, dtype=np.int64) << np.int64(f - bias_frac))
    return Signal(fxp.requantize_array(total, f, out_fmt), out_fmt.frac_bits, "fixed")


@dataclass(frozen=True, eq=False)
class _IntWeightDense:
    """Dense layer whose weights are small integers (binary or ternary).

    ``emit="acc"`` passes the raw accumulator on (the following threshold
    absorbs the bias); ``emit="fixed"`` adds the bias and re-quantizes.
    """

    n_in: int
    n_out: int
    input_kind: str  # "pm1" or "int"
    input_frac: int
    emit: str
    acc_bits: int
    bias_raw: np.ndarray | None = None
    bias_frac: int = 0
    out_fmt: FixedPointFormat | None = None
    source: int = -1

    def _accumulate(self, sig: Signal) -> np.ndarray:
        raise NotImplementedError

    def execute(self, sig: Signal) -> Signal:
        acc = self._accumulate(sig)
        if self.emit == "acc":
            return Signal(acc, self.input_frac, "acc")
        return _emit_fixed(acc, self.input_frac, self.bias_raw, self.bias_frac, self.out_fmt)


@dataclass(frozen=True, eq=False)
class PackedBinaryDense(_IntWeightDense):
    words: np.ndarray = field(default=None, repr=False)  # (n_out, ceil(n_in/64)) uint64
    kind = "PackedBinaryDense"

    def _accumulate(self, sig: Signal) -> np.ndarray:
        if self.input_kind == "pm1":
            x_words = ops._backend().pack_rows(np.ascontiguousarray(sig.raw, dtype=np.int8))
            return ops.binary_gemm(self.words, x_words, self.n_in)
        return ops.binary_weight_matvec(self.words, self.n_in, sig.raw)

    def signs(self) -> np.ndarray:
        return ops.unpack_matrix(self.words, self.n_in)


@dataclass(frozen=True, eq=False)
class TernaryDense(_IntWeightDense):
    codes: np.ndarray = field(default=None, repr=False)  # (n_out, n_in) int8 in {-1,0,1}
    kind = "TernaryDense"

    def _accumulate(self, sig: Signal) -> np.ndarray:
        return ops.exact_int_gemm(self.codes, sig.raw)


@dataclass(frozen=True, eq=False)
class FixedDense:
    n_in: int
    n_out: int
    weights_raw: np.ndarray = field(repr=False)
    weight_frac: int
    bias_raw: np.ndarray = field(repr=False)
    bias_frac: int
    out_fmt: FixedPointFormat
    acc_bits: int
    source: int = -1
    kind = "FixedDense"

    def execute(self, sig: Signal) -> Signal:
        acc = ops.exact_int_gemm(self.weights_raw, sig.raw)
        return _emit_fixed(acc, self.weight_frac + sig.frac, self.bias_raw, self.bias_frac,
                           self.out_fmt)


@dataclass(frozen=True, eq=False)
class ThresholdLayer:
    """Per-node comparison producing +-1.

    polarity +1: output +1 iff x >= threshold; polarity -1: +1 iff x <= threshold.
    Nodes in ``constant_mask`` always emit ``constant_value``.
    """

    thresholds: np.ndarray
    polarity: np.ndarray
    constant_mask: np.ndarray
    constant_value: np.ndarray
    source: int = -1
    kind = "ThresholdLayer"

    @property
    def width(self) -> int:
        return len(self.thresholds)

    def execute(self, sig: Signal) -> Signal:
        return Signal(ops.apply_thresholds(sig.raw, self).astype(np.int64), 0, "pm1")


@dataclass(frozen=True, eq=False)
class TwoThresholdLayer:
    """Per-node window comparison producing {-1, 0, +1}.

    polarity +1: +1 above ``upper``, -1 below ``lower``, 0 in between
    (inclusive); polarity -1 swaps the two signs.
    """

    lower: np.ndarray
    upper: np.ndarray
    polarity: np.ndarray
    constant_mask: np.ndarray
    constant_value: np.ndarray
    source: int = -1
    kind = "TwoThresholdLayer"

    @property
    def width(self) -> int:
        return len(self.lower)

    def execute(self, sig: Signal) -> Signal:
        return Signal(ops.apply_thresholds(sig.raw, self).astype(np.int64), 0, "ternary")


@dataclass(frozen=True, eq=False)
class FixedBatchNorm:
    """``y = scale*x + shift`` with both coefficients quantized to ``param_fmt``."""

    scale_raw: np.ndarray = field(repr=False)
    shift_raw: np.ndarray = field(repr=False)
    param_fmt: FixedPointFormat
    out_fmt: FixedPointFormat
    source: int = -1
    kind = "FixedBatchNorm"

    def execute(self, sig: Signal) -> Signal:
        prod = np.asarray(sig.raw, dtype=np.int64) * self.scale_raw
        return _emit_fixed(prod, self.param_fmt.frac_bits + sig.frac, self.shift_raw,
                           self.param_fmt.frac_bits, self.out_fmt)


@dataclass(frozen=True, eq=False)
class FixedActivation:
    """ReLU, clipped ReLU or identity on fixed-point values."""

    activation: str
    y_max: float
    out_fmt: FixedPointFormat
    source: int = -1
    kind = "FixedActivation"

    def execute(self, sig: Signal) -> Signal:
        raw = np.asarray(sig.raw, dtype=np.int64)
        if self.activation in ("relu", "clipped_relu"):
            raw = np.maximum(raw, 0)
        out = fxp.requantize_array(raw, sig.frac, self.out_fmt)
        if self.activation == "clipped_relu":
            cap = fxp.quantize_array(self.y_max, self.out_fmt.with_modes(overflow=fxp.SATURATE))
            out = np.minimum(out, cap)
        return Signal(out, self.out_fmt.frac_bits, "fixed")


@dataclass(frozen=True, eq=False)
class LutSoftmaxLayer:
    lut: ops.LutSoftmax
    source: int = -1
    kind = "LutSoftmax"

    def execute(self, sig: Signal) -> Signal:
        res = ops.lut_softmax(ops.FixedArray(sig.raw, sig.frac), self.lut)
        return Signal(np.atleast_2d(res.raw), res.frac, "fixed")


LoweredLayer = (PackedBinaryDense | TernaryDense | FixedDense | ThresholdLayer
                | TwoThresholdLayer | FixedBatchNorm | FixedActivation | LutSoftmaxLayer)
