"""Execution kernels for compiled models.

The bit-level inner loops come from a compiled extension when it is
available and fall back to NumPy otherwise.  ``BNNC_BACKEND=numpy`` forces the
fallback.
"""

from __future__ import annotations

import os

from . import _npkernels

_requested = os.environ.get("BNNC_BACKEND", "auto").lower()
_native = None
if _requested != "numpy":
    try:
        from . import _ckernels as _native
    except ImportError:
        if _requested == "cython":
            raise
        _native = None

backend = _native if _native is not None else _npkernels
BACKEND = backend.BACKEND
fallback = _npkernels


def available_backends() -> dict:
    out = {"numpy": _npkernels}
    if _native is not None:
        out["cython"] = _native
    return out


from .ops import (  # noqa: E402
    FixedArray,
    LutSoftmax,
    PackedBitVector,
    TernaryRows,
    apply_thresholds,
    binary_matvec,
    binary_weight_matvec,
    decode_ternary,
    encode_ternary,
    exact_int_gemm,
    fixed_matvec,
    lut_softmax,
    pack,
    pack_matrix,
    ternary_matvec,
    unpack,
    xnor_dot,
)
from .engine import run_batch, run_compiled  # noqa: E402

__all__ = [
    "BACKEND", "FixedArray", "LutSoftmax", "PackedBitVector", "TernaryRows", "apply_thresholds",
    "available_backends", "binary_matvec", "binary_weight_matvec", "decode_ternary",
    "encode_ternary", "exact_int_gemm", "fixed_matvec", "lut_softmax", "pack", "pack_matrix",
    "run_batch", "run_compiled", "ternary_matvec", "unpack", "xnor_dot",
]
