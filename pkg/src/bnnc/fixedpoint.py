"""Signed two's-complement fixed-point numbers <T,I>.

A format has ``T`` total bits, ``I`` integer bits (sign included) and
``F = T - I`` fractional bits.  Values are carried as raw integers in units
of ``2**-F``.  Scalar helpers work on exact Python integers; the ``*_array``
helpers are the vectorized equivalents used by the kernels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

NEAREST_EVEN = "nearest_even"
TRUNCATE = "truncate"
SATURATE = "saturate"
WRAP = "wrap"

_ROUNDING = (NEAREST_EVEN, TRUNCATE)
_OVERFLOW = (SATURATE, WRAP)
_ALIASES = {
    "rnd": NEAREST_EVEN, "nearest": NEAREST_EVEN, "nearest-even": NEAREST_EVEN,
    "trn": TRUNCATE, "sat": SATURATE,
}


class FormatError(ValueError):
    """Invalid fixed-point format description."""


class FixedPointDomainError(ValueError):
    """Value cannot be quantized (NaN or infinite)."""


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    integer_bits: int
    rounding: str = NEAREST_EVEN
    overflow: str = SATURATE

    def __post_init__(self):
        t, i = self.total_bits, self.integer_bits
        if not isinstance(t, (int, np.integer)) or not isinstance(i, (int, np.integer)):
            raise FormatError(f"bit counts must be integers, got {t!r}, {i!r}")
        if not 2 <= t <= 64:
            raise FormatError(f"total_bits must be in [2, 64], got {t}")
        if not 1 <= i <= t:
            raise FormatError(f"integer_bits must be in [1, total_bits={t}], got {i}")
        if self.rounding not in _ROUNDING:
            raise FormatError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in _OVERFLOW:
            raise FormatError(f"unknown overflow mode {self.overflow!r}")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def lo(self) -> float:
        return -math.ldexp(1.0, self.integer_bits - 1)

    @property
    def hi(self) -> float:
        return math.ldexp(1.0, self.integer_bits - 1) - self.step

    def with_modes(self, rounding: str | None = None, overflow: str | None = None):
        return FixedPointFormat(self.total_bits, self.integer_bits,
                                rounding or self.rounding, overflow or self.overflow)

    def __str__(self) -> str:
        s = f"fixed<{self.total_bits},{self.integer_bits}"
        if (self.rounding, self.overflow) != (NEAREST_EVEN, SATURATE):
            s += f",{self.rounding},{self.overflow}"
        return s + ">"


@dataclass(frozen=True)
class FixedValue:
    raw: int
    format: FixedPointFormat

    def __post_init__(self):
        if not self.format.raw_min <= self.raw <= self.format.raw_max:
            raise ValueError(f"raw value {self.raw} does not fit in {self.format}")

    @property
    def value(self) -> float:
        return math.ldexp(float(self.raw), -self.format.frac_bits)

    def __float__(self) -> float:
        return self.value


def make_format(total_bits: int, integer_bits: int, rounding: str = NEAREST_EVEN,
                overflow: str = SATURATE) -> FixedPointFormat:
    return FixedPointFormat(total_bits, integer_bits,
                            _ALIASES.get(rounding, rounding), _ALIASES.get(overflow, overflow))


_FORMAT_RE = re.compile(r"^\s*(?:fixed|ap_fixed)?\s*<\s*(\d+)\s*,\s*(\d+)\s*"
                        r"(?:,\s*([\w-]+)\s*)?(?:,\s*([\w-]+)\s*)?>\s*$")


def parse_format(text: str) -> FixedPointFormat:
    """Parse ``fixed<T,I>`` (optionally ``fixed<T,I,rounding,overflow>``)."""
    m = _FORMAT_RE.match(text)
    if m is None:
        raise FormatError(f"cannot parse fixed-point format {text!r}; expected fixed<T,I>")
    t, i, rnd, ovf = m.groups()
    return make_format(int(t), int(i), rnd or NEAREST_EVEN, ovf or SATURATE)


def representable_range(fmt: FixedPointFormat) -> tuple[float, float]:
    return fmt.lo, fmt.hi


# -- exact scalar path -------------------------------------------------------

def _round_fraction(q: Fraction, rounding: str) -> int:
    if rounding == TRUNCATE:
        return math.floor(q)
    return round(q)  # Fraction.__round__ is half-to-even


def _overflow_int(raw: int, fmt: FixedPointFormat) -> int:
    if fmt.raw_min <= raw <= fmt.raw_max:
        return raw
    if fmt.overflow == SATURATE:
        return fmt.raw_max if raw > fmt.raw_max else fmt.raw_min
    span = 1 << fmt.total_bits
    return ((raw - fmt.raw_min) % span) + fmt.raw_min


def shift_round_int(raw: int, shift: int, rounding: str) -> int:
    """Divide an exact integer by ``2**shift`` (shift may be negative) and round."""
    if shift <= 0:
        return raw << -shift
    q = raw >> shift
    if rounding == TRUNCATE:
        return q
    rem = raw - (q << shift)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def requantize_raw(raw: int, frac_bits: int, fmt: FixedPointFormat) -> FixedValue:
    """Re-express an exact value ``raw * 2**-frac_bits`` in ``fmt``."""
    r = shift_round_int(int(raw), frac_bits - fmt.frac_bits, fmt.rounding)
    return FixedValue(_overflow_int(r, fmt), fmt)


def quantize(x: float, fmt: FixedPointFormat) -> FixedValue:
    x = float(x)
    if not math.isfinite(x):
        raise FixedPointDomainError(f"cannot quantize non-finite value {x}")
    scaled = Fraction(x) * (1 << fmt.frac_bits)
    return FixedValue(_overflow_int(_round_fraction(scaled, fmt.rounding), fmt), fmt)


def fixed_add(a: FixedValue, b: FixedValue, out_fmt: FixedPointFormat) -> FixedValue:
    f = max(a.format.frac_bits, b.format.frac_bits)
    raw = (a.raw << (f - a.format.frac_bits)) + (b.raw << (f - b.format.frac_bits))
    return requantize_raw(raw, f, out_fmt)


def fixed_mul(a: FixedValue, b: FixedValue, out_fmt: FixedPointFormat) -> FixedValue:
    return requantize_raw(a.raw * b.raw, a.format.frac_bits + b.format.frac_bits, out_fmt)


# -- vectorized path ---------------------------------------------------------

def quantize_array(x, fmt: FixedPointFormat) -> np.ndarray:
    """Quantize a real array to raw int64 values of ``fmt``.

    Scaling by a power of two is exact in float64, and so is rint/floor, so the
    only inexact step would be an out-of-range cast, which is handled
    separately.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FixedPointDomainError("cannot quantize non-finite values")
    scaled = np.ldexp(x, fmt.frac_bits)
    scaled = np.floor(scaled) if fmt.rounding == TRUNCATE else np.rint(scaled)
    limit = math.ldexp(1.0, fmt.total_bits - 1)
    over = scaled >= limit
    under = scaled < -limit
    raw = np.where(over | under, 0.0, scaled).astype(np.int64)
    if over.any() or under.any():
        if fmt.overflow == SATURATE:
            raw[over] = fmt.raw_max
            raw[under] = fmt.raw_min
        else:
            idx = np.flatnonzero(over | under)
            flat = raw.reshape(-1)
            src = scaled.reshape(-1)
            for k in idx:
                flat[k] = _overflow_int(int(src[k]), fmt)
    return raw


def to_real(raw, fmt_or_frac) -> np.ndarray:
    frac = fmt_or_frac.frac_bits if isinstance(fmt_or_frac, FixedPointFormat) else int(fmt_or_frac)
    return np.ldexp(np.asarray(raw, dtype=np.float64), -frac)


def overflow_array(raw: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if fmt.overflow == SATURATE:
        return np.clip(raw, fmt.raw_min, fmt.raw_max)
    if fmt.total_bits == 64:
        return raw
    span = np.int64(1) << np.int64(fmt.total_bits)
    return ((raw - fmt.raw_min) % span) + fmt.raw_min


def shift_round_array(raw: np.ndarray, shift: int, rounding: str) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return raw << np.int64(-shift)
    s = np.int64(shift)
    q = raw >> s
    if rounding == TRUNCATE:
        return q
    rem = raw - (q << s)
    half = np.int64(1) << np.int64(shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def requantize_array(raw: np.ndarray, frac_bits: int, fmt: FixedPointFormat) -> np.ndarray:
    """Vectorized :func:`requantize_raw` on int64 arrays."""
    return overflow_array(shift_round_array(raw, frac_bits - fmt.frac_bits, fmt.rounding), fmt)
