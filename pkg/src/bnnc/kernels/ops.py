"""Bit-packed, ternary and fixed-point primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import fixedpoint as fxp
from ..fixedpoint import FixedPointFormat

_EXACT_F64 = 2 ** 53


def _backend():
    from . import backend
    return backend


# -- packed +-1 vectors ------------------------------------------------------

@dataclass(frozen=True)
class PackedBitVector:
    """+-1 vector packed LSB-first into 64-bit words; -1 -> 0, +1 -> 1."""

    words: np.ndarray
    n: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64).reshape(-1)
        object.__setattr__(self, "words", words)
        if self.n < 0 or len(words) != (self.n + 63) // 64:
            raise ValueError(f"{len(words)} words cannot hold exactly {self.n} bits")
        if self.n % 64:
            pad_mask = ~np.uint64((1 << (self.n % 64)) - 1)
            if words[-1] & pad_mask:
                raise ValueError("padding bits beyond the logical length must be zero")


def _as_codes(v) -> np.ndarray:
    v = np.asarray(v)
    if v.size and not np.all((v == 1) | (v == -1)):
        raise ValueError("binary vectors may only contain -1 and +1")
    return v.astype(np.int8)


def pack(v) -> PackedBitVector:
    codes = _as_codes(v).reshape(1, -1)
    return PackedBitVector(_backend().pack_rows(np.ascontiguousarray(codes))[0], codes.shape[1])


def pack_matrix(m) -> np.ndarray:
    """Pack each row of a +-1 matrix; returns ``(rows, words)`` uint64."""
    codes = _as_codes(m)
    if codes.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    return _backend().pack_rows(np.ascontiguousarray(codes))


def unpack(p: PackedBitVector) -> np.ndarray:
    bits = np.unpackbits(p.words.astype("<u8").view(np.uint8), bitorder="little")[:p.n]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def unpack_matrix(words: np.ndarray, n: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype=np.uint64)
    bits = np.unpackbits(words.astype("<u8").view(np.uint8), axis=1, bitorder="little")[:, :n]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def xnor_dot(a: PackedBitVector, b: PackedBitVector) -> int:
    """Sum of a_i*b_i over +-1 values, as 2*popcount(xnor masked to n) - n."""
    if a.n != b.n:
        raise ValueError(f"length mismatch: {a.n} vs {b.n}")
    if a.n == 0:
        return 0
    x = ~(a.words ^ b.words)
    if a.n % 64:
        x[-1] &= np.uint64((1 << (a.n % 64)) - 1)
    ones = int(np.bitwise_count(x).sum()) if hasattr(np, "bitwise_count") else \
        sum(bin(int(w)).count("1") for w in x)
    return 2 * ones - a.n


def binary_matvec(weights, x: PackedBitVector) -> np.ndarray:
    """XNOR-popcount product of packed weight rows with a packed input."""
    words = np.ascontiguousarray(weights, dtype=np.uint64)
    if words.ndim != 2 or words.shape[1] != len(x.words):
        raise ValueError(f"weight rows have {words.shape[-1]} words, input has {len(x.words)}")
    return _backend().xnor_gemm(words, x.words.reshape(1, -1), x.n)[0]


def binary_gemm(weights: np.ndarray, x_words: np.ndarray, n: int) -> np.ndarray:
    """Batched XNOR-popcount: packed inputs ``(N, words)`` -> ``(N, rows)``."""
    return _backend().xnor_gemm(np.ascontiguousarray(weights, dtype=np.uint64),
                                np.ascontiguousarray(x_words, dtype=np.uint64), n)


# -- integer GEMMs -----------------------------------------------------------

def exact_int_gemm(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact ``x @ weights.T`` for integer operands.

    Uses float64 BLAS when every partial sum is provably below 2**53 (then
    the result is exact), otherwise the integer kernel.
    """
    weights = np.asarray(weights)
    x = np.atleast_2d(np.asarray(x, dtype=np.int64))
    n = weights.shape[1]
    wmax = int(np.abs(weights).max()) if weights.size else 0
    xmax = int(np.abs(x).max()) if x.size else 0
    if wmax * xmax * n < _EXACT_F64:
        out = x.astype(np.float64) @ weights.astype(np.float64).T
        return out.astype(np.int64)
    be = _backend()
    if weights.dtype == np.int8:
        return be.int8_gemm(np.ascontiguousarray(weights), np.ascontiguousarray(x))
    return be.int64_gemm(np.ascontiguousarray(weights, dtype=np.int64), np.ascontiguousarray(x))


def binary_weight_matvec(words: np.ndarray, n: int, x) -> np.ndarray:
    """Packed +-1 weights times an integer (non-binary) input vector or batch."""
    signs = unpack_matrix(words, n)
    return exact_int_gemm(signs, x)


# -- ternary weights ---------------------------------------------------------

_CODE_OF = {0: 0b00, 1: 0b01, -1: 0b11}


@dataclass(frozen=True)
class TernaryRows:
    """Rows of {-1, 0, +1} as 2-bit codes (00=0, 01=+1, 11=-1), 32 per word, LSB-first."""

    words: np.ndarray
    n: int

    def decode(self) -> np.ndarray:
        return decode_ternary(self.words, self.n)


def encode_ternary(m) -> TernaryRows:
    m = np.atleast_2d(np.asarray(m))
    if m.size and not np.all((m == 0) | (m == 1) | (m == -1)):
        raise ValueError("ternary weights may only contain -1, 0 and +1")
    rows, n = m.shape
    n_words = (n + 31) // 32
    codes = np.zeros((rows, n_words * 32), dtype=np.uint64)
    codes[:, :n] = np.where(m == 1, 0b01, np.where(m == -1, 0b11, 0b00))
    shifts = (2 * np.arange(32, dtype=np.uint64))
    words = np.bitwise_or.reduce(codes.reshape(rows, n_words, 32) << shifts, axis=2)
    return TernaryRows(words.astype(np.uint64), n)


def decode_ternary(words: np.ndarray, n: int) -> np.ndarray:
    words = np.atleast_2d(np.asarray(words, dtype=np.uint64))
    shifts = (2 * np.arange(32, dtype=np.uint64))
    codes = ((words[:, :, None] >> shifts) & np.uint64(0b11)).reshape(words.shape[0], -1)
    codes_n = codes[:, :n]
    if np.any(codes_n == 0b10):
        raise ValueError("invalid ternary code 0b10")
    if np.any(codes[:, n:]):
        raise ValueError("padding codes beyond the row length must be zero")
    return np.where(codes_n == 0b01, 1, np.where(codes_n == 0b11, -1, 0)).astype(np.int8)


def ternary_matvec(weights, x) -> np.ndarray:
    """Add (+1), subtract (-1) or skip (0) each input for every weight row."""
    if isinstance(weights, TernaryRows):
        w = weights.decode()
    else:
        w = np.asarray(weights)
        if w.size and not np.all((w == 0) | (w == 1) | (w == -1)):
            raise ValueError("ternary weights may only contain -1, 0 and +1")
        w = w.astype(np.int8)
    x = np.asarray(x, dtype=np.int64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"weights expect {w.shape[1]} inputs, got {x.shape[-1]}")
    out = exact_int_gemm(w, x.reshape(-1, w.shape[1]))
    return out[0] if x.ndim == 1 else out


# -- fixed point -------------------------------------------------------------

@dataclass(frozen=True)
class FixedArray:
    """Array of raw fixed-point integers with ``frac`` fractional bits."""

    raw: np.ndarray
    frac: int
    fmt: FixedPointFormat | None = None

    @classmethod
    def quantize(cls, x, fmt: FixedPointFormat) -> "FixedArray":
        return cls(fxp.quantize_array(x, fmt), fmt.frac_bits, fmt)

    @property
    def real(self) -> np.ndarray:
        return fxp.to_real(self.raw, self.frac)


def fixed_matvec(weights: FixedArray, x: FixedArray, out_fmt: FixedPointFormat,
                 acc_fmt: FixedPointFormat | None = None,
                 bias: FixedArray | None = None) -> FixedArray:
    """Exact wide accumulation of raw products, then one re-quantization.

    ``acc_fmt`` optionally models a bounded accumulator register; by default
    the accumulator is exact.
    """
    acc = exact_int_gemm(weights.raw, np.atleast_2d(x.raw))
    frac = weights.frac + x.frac
    if bias is not None:
        shift = frac - bias.frac
        if shift >= 0:
            acc = acc + (np.asarray(bias.raw, dtype=np.int64) << np.int64(shift))
        else:
            acc = (acc << np.int64(-shift)) + bias.raw
            frac = bias.frac
    if acc_fmt is not None:
        acc = fxp.requantize_array(acc, frac, acc_fmt)
        frac = acc_fmt.frac_bits
    out = fxp.requantize_array(acc, frac, out_fmt)
    if np.ndim(x.raw) == 1:
        out = out[0]
    return FixedArray(out, out_fmt.frac_bits, out_fmt)


# -- thresholds --------------------------------------------------------------

def apply_thresholds(acc, layer) -> np.ndarray:
    """Compare each node against its folded threshold(s).

    Binary layers (``thresholds``): polarity +1 gives +1 iff acc >= t,
    polarity -1 gives +1 iff acc <= t.  Two-threshold layers (``lower``,
    ``upper``): polarity +1 gives +1 above upper, -1 below lower, else 0;
    polarity -1 mirrors that.  Degenerate nodes emit their constant.
    """
    acc = np.asarray(acc)
    pol = np.asarray(layer.polarity)
    if hasattr(layer, "lower"):
        above = acc > layer.upper
        below = acc < layer.lower
        out = np.where(above, 1, np.where(below, -1, 0))
        out = np.where(pol < 0, -out, out)
    else:
        t = layer.thresholds
        out = np.where(pol > 0, np.where(acc >= t, 1, -1), np.where(acc <= t, 1, -1))
    mask = np.asarray(layer.constant_mask, dtype=bool)
    if mask.any():
        out = np.where(mask, layer.constant_value, out)
    return out.astype(np.int8)


# -- softmax lookup table ----------------------------------------------------

@dataclass(frozen=True)
class LutSoftmax:
    """Table-driven softmax in fixed point.

    ``mode="max_subtract"`` looks up ``exp(x - max(x))`` over ``[x_min, 0]``
    and normalises with one reciprocal.  ``mode="pairwise"`` reproduces the
    older HLS layout: each output is ``1 / sum_j exp(x_j - x_i)`` with an exp
    table over ``[x_min, -x_min)`` and an inversion table over
    ``[0, inv_range)``.  Table entries and sums use the table format's own
    rounding and overflow modes, so with ``wrap`` large score gaps alias, as
    they do with default HLS ``ap_fixed`` types.
    """

    table_fmt: FixedPointFormat
    inv_fmt: FixedPointFormat
    out_fmt: FixedPointFormat
    table_size: int = 1024
    x_min: float = -8.0
    mode: str = "max_subtract"
    inv_range: float = 64.0
    exp_table: np.ndarray = field(init=False, repr=False, compare=False)
    inv_table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("max_subtract", "pairwise"):
            raise ValueError(f"unknown softmax LUT mode {self.mode!r}")
        if self.table_size < 2 or self.x_min >= 0:
            raise ValueError("table_size must be >= 2 and x_min negative")
        n = self.table_size
        if self.mode == "max_subtract":
            grid = self.x_min + np.arange(n) * (-self.x_min / (n - 1))
            inv = np.zeros(0, dtype=np.int64)
        else:
            grid = self.x_min + np.arange(n) * (-2.0 * self.x_min / n)
            inv_in = self.inv_range * np.arange(n) / n
            with np.errstate(divide="ignore"):
                vals = np.where(inv_in > 0, 1.0 / np.where(inv_in > 0, inv_in, 1.0), 0.0)
            inv = fxp.quantize_array(vals, self.inv_fmt)  # the 1/0 entry stays 0
        object.__setattr__(self, "exp_table", fxp.quantize_array(np.exp(grid), self.table_fmt))
        object.__setattr__(self, "inv_table", inv)

    @property
    def step(self) -> float:
        if self.mode == "max_subtract":
            return -self.x_min / (self.table_size - 1)
        return -2.0 * self.x_min / self.table_size


def _round_div(num: np.ndarray, den: np.ndarray, rounding: str) -> np.ndarray:
    q = num // den
    if rounding == fxp.TRUNCATE:
        return q
    r = num - q * den
    twice = 2 * r
    up = (twice > den) | ((twice == den) & (q % 2 == 1))
    return q + up


def lut_softmax(scores: FixedArray, lut: LutSoftmax) -> FixedArray:
    raw = np.atleast_2d(np.asarray(scores.raw, dtype=np.int64))
    if raw.shape[-1] == 0:
        raise ValueError("softmax needs at least one score")
    tf = lut.table_fmt.frac_bits
    n = lut.table_size
    if lut.mode == "max_subtract":
        d = fxp.to_real(raw - raw.max(axis=1, keepdims=True), scores.frac)
        idx = np.clip(np.floor((d - lut.x_min) / lut.step + 0.5), 0, n - 1).astype(np.int64)
        e = lut.exp_table[idx]
        s = e.sum(axis=1, keepdims=True)
        fi = lut.inv_fmt.frac_bits
        num = np.int64(1) << np.int64(tf + fi)
        pos = s > 0
        inv = _round_div(np.full_like(s, num), np.where(pos, s, 1), lut.inv_fmt.rounding)
        inv = np.where(pos, inv, lut.inv_fmt.raw_max)
        inv = fxp.overflow_array(inv, lut.inv_fmt)
        out = fxp.requantize_array(e * inv, tf + fi, lut.out_fmt)
    else:
        diff = fxp.to_real(raw[:, None, :] - raw[:, :, None], scores.frac)  # [b, i, j] = x_j - x_i
        idx = np.clip(np.floor((diff - lut.x_min) / lut.step), 0, n - 1).astype(np.int64)
        e = lut.exp_table[idx]
        one = fxp.quantize_array(1.0, lut.table_fmt)
        eye = np.eye(raw.shape[1], dtype=bool)
        e = np.where(eye[None], one, e)
        s = fxp.overflow_array(e.sum(axis=2), lut.table_fmt)
        k = np.clip(np.floor(fxp.to_real(s, tf) * n / lut.inv_range), 0, n - 1).astype(np.int64)
        out = fxp.requantize_array(lut.inv_table[k], lut.inv_fmt.frac_bits, lut.out_fmt)
    if np.ndim(scores.raw) == 1:
        out = out[0]
    return FixedArray(out, lut.out_fmt.frac_bits, lut.out_fmt)
