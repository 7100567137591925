"""Single-core throughput of the packed binary matvec against a float matvec.

Usage: ``python3 benchmarks/bench_kernels.py [--n 1024] [--repeats 200]``
"""

from __future__ import annotations

import os

# pin BLAS to one core before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import timeit  # noqa: E402

import numpy as np  # noqa: E402

from bnnc import kernels  # noqa: E402


def _best_seconds(fn, repeats: int) -> float:
    """Fastest per-call time over a few timing rounds."""
    return min(timeit.repeat(fn, number=repeats, repeat=5)) / repeats


def run(n: int = 1024, repeats: int = 200, seed: int = 42) -> dict:
    """Seconds per ``n x n`` matvec for the float reference and each packed backend."""
    rng = np.random.default_rng(seed)
    w = rng.choice(np.array([-1, 1], dtype=np.int8), (n, n))
    x = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    wf, xf = w.astype(np.float64), x.astype(np.float64)
    reference = (wf @ xf).astype(np.int64)

    w32, x32 = wf.astype(np.float32), xf.astype(np.float32)
    times = {"float64": _best_seconds(lambda: wf @ xf, repeats),
             "float32": _best_seconds(lambda: w32 @ x32, repeats)}
    for name, be in kernels.available_backends().items():
        words = be.pack_rows(np.ascontiguousarray(w))
        xw = be.pack_rows(np.ascontiguousarray(x.reshape(1, -1)))
        np.testing.assert_array_equal(be.xnor_gemm(words, xw, n)[0], reference)
        times[f"packed_{name}"] = _best_seconds(lambda: be.xnor_gemm(words, xw, n), repeats)
    return times


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--repeats", type=int, default=200)
    args = p.parse_args(argv)
    times = run(args.n, args.repeats)
    base = min(times["float64"], times["float32"])
    print(f"{args.n}x{args.n} matvec, single core")
    for name, t in times.items():
        print(f"  {name:<14} {t * 1e6:10.1f} us/call   speedup vs fastest float {base / t:6.2f}x")


if __name__ == "__main__":
    main()
