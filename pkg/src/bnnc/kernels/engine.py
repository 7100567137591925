"""Run a CompiledModel on real-valued inputs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import fixedpoint as fxp


class InputWidthError(ValueError):
    pass


def _forward_raw(model, raw: np.ndarray):
    from ..compiler.layers import Signal

    sig = Signal(raw, model.io_format.frac_bits, "fixed")
    for layer in model.layers:
        sig = layer.execute(sig)
    return sig


def _scores(sig) -> np.ndarray:
    if sig.kind in ("pm1", "ternary"):
        return sig.raw.astype(np.float64)
    return fxp.to_real(sig.raw, sig.frac)


def run_batch(model, X, threads: int = 1, chunk: int = 4096):
    """Scores ``(N, classes)`` and predicted classes for a batch.

    Rows are independent, so splitting the batch across ``threads`` workers
    gives bit-identical results for any thread count.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_width:
        raise InputWidthError(f"model expects {model.input_width} inputs, got {X.shape[1]}")
    raw = fxp.quantize_array(X, model.io_format)
    bounds = [(s, min(s + chunk, len(raw))) for s in range(0, len(raw), chunk)] or [(0, 0)]

    def work(b):
        return _scores(_forward_raw(model, raw[b[0]:b[1]]))

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    scores = np.concatenate(parts, axis=0) if parts else np.zeros((0, model.classes))
    return scores, np.argmax(scores, axis=1) if len(scores) else np.zeros(0, dtype=np.int64)


def run_compiled(model, x):
    """Single-sample inference: ``(scores, predicted_class)``; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputWidthError("run_compiled takes one input vector; use run_batch for batches")
    scores, cls = run_batch(model, x[None, :])
    return scores[0], int(cls[0])
