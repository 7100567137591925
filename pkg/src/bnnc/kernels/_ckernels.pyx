# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: bit packing, XNOR-popcount and exact integer GEMMs."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, int64_t, uint64_t

cnp.import_array()

BACKEND = "cython"


cdef extern from *:
    """
    static inline int bnnc_popcount64(unsigned long long v) {
        return __builtin_popcountll(v);
    }
    """
    int bnnc_popcount64(unsigned long long v) nogil


def pack_rows(const int8_t[:, ::1] codes):
    """Pack +-1 rows LSB-first into 64-bit words (+1 -> 1, -1 -> 0)."""
    cdef Py_ssize_t n_rows = codes.shape[0], n = codes.shape[1]
    cdef Py_ssize_t n_words = (n + 63) // 64
    out = np.zeros((n_rows, n_words), dtype=np.uint64)
    cdef uint64_t[:, ::1] w = out
    cdef Py_ssize_t r, i
    cdef int8_t c
    with nogil:
        for r in range(n_rows):
            for i in range(n):
                c = codes[r, i]
                if c > 0:
                    w[r, i >> 6] |= (<uint64_t>1) << (i & 63)
    return out


def xnor_gemm(const uint64_t[:, ::1] weights, const uint64_t[:, ::1] x, Py_ssize_t n):
    """out[b, r] = sum_i w[r,i]*x[b,i] over +-1 = n - 2*popcount(w ^ x).

    Padding bits are zero in both operands, so they never count as mismatches.
    """
    cdef Py_ssize_t R = weights.shape[0], W = weights.shape[1], N = x.shape[0]
    out = np.empty((N, R), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef Py_ssize_t b, r, k
    cdef int64_t mism
    with nogil:
        for b in range(N):
            for r in range(R):
                mism = 0
                for k in range(W):
                    mism += bnnc_popcount64(weights[r, k] ^ x[b, k])
                o[b, r] = n - 2 * mism
    return out


def int8_gemm(const int8_t[:, ::1] weights, const int64_t[:, ::1] x):
    """Add/subtract/skip accumulation for {-1, 0, +1} weight matrices."""
    cdef Py_ssize_t R = weights.shape[0], n = weights.shape[1], N = x.shape[0]
    out = np.zeros((N, R), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef Py_ssize_t b, r, i
    cdef int64_t acc
    cdef int8_t c
    with nogil:
        for b in range(N):
            for r in range(R):
                acc = 0
                for i in range(n):
                    c = weights[r, i]
                    if c > 0:
                        acc += x[b, i]
                    elif c < 0:
                        acc -= x[b, i]
                o[b, r] = acc
    return out


def int64_gemm(const int64_t[:, ::1] weights, const int64_t[:, ::1] x):
    """Exact integer multiply-accumulate, out[b, r] = sum_i w[r,i]*x[b,i]."""
    cdef Py_ssize_t R = weights.shape[0], n = weights.shape[1], N = x.shape[0]
    out = np.zeros((N, R), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef Py_ssize_t b, r, i
    cdef int64_t acc
    with nogil:
        for b in range(N):
            for r in range(R):
                acc = 0
                for i in range(n):
                    acc += weights[r, i] * x[b, i]
                o[b, r] = acc
    return out
