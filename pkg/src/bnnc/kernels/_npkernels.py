"""Pure-NumPy versions of the compiled inner loops (same signatures)."""

import numpy as np

BACKEND = "numpy"

if hasattr(np, "bitwise_count"):
    _popcount = np.bitwise_count
else:  # numpy < 2.0
    _BYTE_COUNTS = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def _popcount(words):
        b = np.ascontiguousarray(words).view(np.uint8).reshape(words.shape + (8,))
        return _BYTE_COUNTS[b].sum(axis=-1, dtype=np.int64)

_CHUNK = 1 << 22  # elements per temporary in xnor_gemm


def pack_rows(codes):
    codes = np.asarray(codes)
    n_rows, n = codes.shape
    n_words = (n + 63) // 64
    bits = np.zeros((n_rows, n_words * 64), dtype=np.uint8)
    bits[:, :n] = codes > 0
    # little bit order within each byte and little-endian words give LSB-first packing
    packed = np.packbits(bits, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64).reshape(n_rows, n_words)


def xnor_gemm(weights, x, n):
    weights = np.asarray(weights, dtype=np.uint64)
    x = np.asarray(x, dtype=np.uint64)
    R, W = weights.shape
    N = x.shape[0]
    out = np.empty((N, R), dtype=np.int64)
    step = max(1, _CHUNK // max(1, R * W))
    for s in range(0, N, step):
        mism = _popcount(x[s:s + step, None, :] ^ weights[None, :, :]).sum(axis=-1, dtype=np.int64)
        out[s:s + step] = n - 2 * mism
    return out


def int8_gemm(weights, x):
    return np.asarray(x, dtype=np.int64) @ np.asarray(weights, dtype=np.int64).T


def int64_gemm(weights, x):
    return np.asarray(x, dtype=np.int64) @ np.asarray(weights, dtype=np.int64).T
