"""Bit-packed, ternary, fixed-point and softmax kernels, plus the inference engine."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnc import kernels
from bnnc.compiler import QuantPlan, compile_model
from bnnc.fixedpoint import make_format, quantize
from bnnc.kernels import (
    FixedArray,
    LutSoftmax,
    PackedBitVector,
    TernaryRows,
    apply_thresholds,
    binary_matvec,
    decode_ternary,
    encode_ternary,
    fixed_matvec,
    lut_softmax,
    pack,
    pack_matrix,
    run_batch,
    run_compiled,
    ternary_matvec,
    unpack,
    xnor_dot,
)
from bnnc.compiler import ThresholdLayer, TwoThresholdLayer, fold_bn_ternary
from bnnc.kernels.engine import InputWidthError
from bnnc.nn import BatchNormLayer, model_forward, softmax
from bnnc.training import build_model, variant_config
from conftest import random_model
from oracles import all_pm1_vectors, naive_pm1_dot

BACKENDS = sorted(kernels.available_backends().items())


class TestPack:
    def test_low_nibble(self):
        assert int(pack([1, -1, 1, 1]).words[0]) == 0b1101

    def test_all_minus_one(self):
        p = pack(-np.ones(64))
        assert p.words.tolist() == [0] and p.n == 64

    def test_round_trip(self, rng):
        for n in (1, 63, 64, 65, 200, 512):
            v = rng.choice([-1, 1], n)
            np.testing.assert_array_equal(unpack(pack(v)), v)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            pack([1, 0, -1])

    @pytest.mark.parametrize("name,be", BACKENDS)
    def test_backends_agree(self, rng, name, be):
        m = rng.choice([-1, 1], (7, 130)).astype(np.int8)
        np.testing.assert_array_equal(be.pack_rows(m), kernels.fallback.pack_rows(m))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 2 ** 64 - 1))
    def test_padding_violation_caught(self, n, garbage):
        p = pack(np.ones(n))
        if n % 64 == 0:
            return
        words = p.words.copy()
        pad = garbage & ~((1 << (n % 64)) - 1) & (2 ** 64 - 1)
        if pad == 0:
            pad = 1 << 63
        words[-1] |= np.uint64(pad)
        with pytest.raises(ValueError):
            PackedBitVector(words, n)


class TestXnorDot:
    def test_self_and_antipodal(self, rng):
        v = rng.choice([-1, 1], 64)
        assert xnor_dot(pack(v), pack(v)) == 64
        assert xnor_dot(pack(v), pack(-v)) == -64

    def test_exhaustive_small(self):
        for n in range(1, 9):
            vs = all_pm1_vectors(n)
            packed = [pack(v) for v in vs]
            ref = vs.astype(np.int64) @ vs.T.astype(np.int64)
            for i, a in enumerate(packed):
                assert [xnor_dot(a, b) for b in packed] == ref[i].tolist()

    @pytest.mark.parametrize("name,be", BACKENDS)
    def test_exhaustive_16_against_fixed_vector(self, rng, name, be):
        vs = all_pm1_vectors(16)
        for w in rng.choice([-1, 1], (4, 16)):
            got = be.xnor_gemm(pack_matrix(w[None]), pack_matrix(vs), 16)[:, 0]
            np.testing.assert_array_equal(got, vs.astype(np.int64) @ w)

    def test_random_naive(self, rng):
        for _ in range(2000):
            n = int(rng.integers(1, 513))
            a, b = rng.choice([-1, 1], n), rng.choice([-1, 1], n)
            assert xnor_dot(pack(a), pack(b)) == naive_pm1_dot(a, b)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            xnor_dot(pack([1, 1]), pack([1, 1, 1]))


class TestBinaryMatvec:
    def test_row_equal_to_input(self, rng):
        v = rng.choice([-1, 1], 100)
        assert binary_matvec(pack_matrix(v[None]), pack(v)).tolist() == [100]

    @pytest.mark.parametrize("name,be", BACKENDS)
    def test_random_vs_float(self, rng, name, be):
        W = rng.choice([-1, 1], (32, 64))
        X = rng.choice([-1, 1], (20, 64))
        got = be.xnor_gemm(pack_matrix(W), pack_matrix(X), 64)
        np.testing.assert_array_equal(got, (X.astype(float) @ W.T.astype(float)).astype(int))
        assert np.abs(got).max() <= 64

    def test_shape_error(self, rng):
        with pytest.raises(ValueError):
            binary_matvec(pack_matrix(rng.choice([-1, 1], (3, 130))), pack(np.ones(10)))


class TestTernary:
    def test_codes(self):
        rows = encode_ternary([[0, 1, -1]])
        assert int(rows.words[0, 0]) == 0b11_01_00
        np.testing.assert_array_equal(rows.decode(), [[0, 1, -1]])

    def test_invalid_code(self):
        with pytest.raises(ValueError):
            decode_ternary(np.array([[0b10]], dtype=np.uint64), 1)
        with pytest.raises(ValueError):
            decode_ternary(np.array([[0b01 << 4]], dtype=np.uint64), 2)
        with pytest.raises(ValueError):
            encode_ternary([[2]])

    def test_matvec(self, rng):
        x = rng.integers(-50, 50, 40)
        assert ternary_matvec(np.zeros((3, 40)), x).tolist() == [0, 0, 0]
        assert ternary_matvec(np.ones((1, 40)), x).tolist() == [x.sum()]
        W = rng.integers(-1, 2, (9, 40))
        naive = [sum(int(w) * int(v) for w, v in zip(row, x)) for row in W]
        assert ternary_matvec(encode_ternary(W), x).tolist() == naive

    @pytest.mark.parametrize("name,be", BACKENDS)
    def test_int_gemm_backends(self, rng, name, be):
        W = rng.integers(-1, 2, (5, 33)).astype(np.int8)
        X = rng.integers(-2 ** 40, 2 ** 40, (4, 33))
        ref = [[sum(int(w) * int(v) for w, v in zip(r, x)) for r in W] for x in X]
        assert be.int8_gemm(W, X).tolist() == ref
        assert be.int64_gemm(W.astype(np.int64), X).tolist() == ref


class TestFixedMatvec:
    def test_identity(self, rng):
        fmt = make_format(16, 6)
        x = FixedArray.quantize(rng.uniform(-4, 4, 4), fmt)
        out = fixed_matvec(FixedArray.quantize(np.eye(4), fmt), x, fmt)
        np.testing.assert_array_equal(out.raw, x.raw)

    def test_rational_oracle(self):
        fmt = make_format(12, 4)
        W = [[0.5, -1.25, 0.125, 2.0], [1.0, 1.0, 1.0, 1.0],
             [-0.375, 0.75, -2.5, 0.0625], [3.0, -0.5, 0.25, -1.0]]
        x = [1.5, -0.25, 2.125, -3.0]
        wq = FixedArray.quantize(W, fmt)
        xq = FixedArray.quantize(x, fmt)
        out = fixed_matvec(wq, xq, fmt)
        for i, row in enumerate(W):
            exact = sum(Fraction(a) * Fraction(b) for a, b in zip(row, x))
            assert out.raw[i] == quantize(float(exact), fmt).raw
            assert Fraction(float(exact)) == exact  # the exact sum is a dyadic rational

    def test_single_rounding(self):
        fmt = make_format(8, 4)  # step 1/16
        w = FixedArray(np.array([[1, 1, 1]]), 4)
        x = FixedArray(np.array([1, 1, 1]), 4)
        assert fixed_matvec(w, x, fmt).raw.tolist() == [0]  # 3/256 rounds to 0
        # 12 products of 1/256 are 0.75 of a step and round up; casting each product first gives 0
        w12 = FixedArray(np.ones((1, 12), dtype=np.int64), 4)
        x12 = FixedArray(np.ones(12, dtype=np.int64), 4)
        assert fixed_matvec(w12, x12, fmt).raw.tolist() == [1]

    def test_saturation(self):
        fmt = make_format(8, 4)
        w = FixedArray.quantize(np.full((1, 4), fmt.hi), fmt)
        x = FixedArray.quantize(np.full(4, fmt.hi), fmt)
        assert fixed_matvec(w, x, fmt).raw.tolist() == [fmt.raw_max]
        assert fixed_matvec(w, FixedArray.quantize(np.full(4, fmt.lo), fmt), fmt).raw.tolist() \
            == [fmt.raw_min]

    def test_bias_and_acc_fmt(self):
        fmt = make_format(16, 8)
        w = FixedArray.quantize([[1.0, 2.0]], fmt)
        x = FixedArray.quantize([0.5, 0.25], fmt)
        out = fixed_matvec(w, x, fmt, bias=FixedArray.quantize([0.125], fmt))
        assert out.real.tolist() == [1.125]
        narrow = fixed_matvec(w, x, fmt, acc_fmt=make_format(4, 4))
        assert narrow.real.tolist() == [1.0]


class TestApplyThresholds:
    def test_binary(self):
        layer = ThresholdLayer(np.zeros(3), np.ones(3), np.zeros(3, bool), np.zeros(3))
        assert apply_thresholds(np.array([-5, 0, 7]), layer).tolist() == [-1, 1, 1]
        flipped = ThresholdLayer(np.zeros(3), -np.ones(3), np.zeros(3, bool), np.zeros(3))
        assert apply_thresholds(np.array([-5, 0, 7]), flipped).tolist() == [1, 1, -1]

    def test_two_threshold_matches_folded_oracle(self):
        bn = BatchNormLayer([3.0] * 3, [4 - 1e-3] * 3, [2.0] * 3, [1.0] * 3)
        layer = fold_bn_ternary(bn, 0.5)
        np.testing.assert_allclose(layer.lower, 1.5)
        np.testing.assert_allclose(layer.upper, 2.5)
        assert apply_thresholds(np.array([1, 2, 3]), layer).tolist() == [-1, 0, 1]

    def test_constants(self):
        layer = TwoThresholdLayer(np.zeros(2), np.zeros(2), np.ones(2), np.array([True, False]),
                                  np.array([1, 0]))
        assert apply_thresholds(np.array([-9, -9]), layer).tolist() == [1, -1]


class TestLutSoftmax:
    @pytest.mark.parametrize("mode", ["max_subtract", "pairwise"])
    def test_equal_scores(self, mode):
        fmt = make_format(18, 8)
        lut = LutSoftmax(fmt, fmt, fmt, mode=mode)
        for c in (2, 5, 10):
            out = lut_softmax(FixedArray.quantize(np.full(c, 1.7), fmt), lut).real
            np.testing.assert_allclose(out, 1.0 / c, atol=lut.step)

    @pytest.mark.parametrize("mode", ["max_subtract", "pairwise"])
    @pytest.mark.parametrize("t", [(10, 4), (18, 8), (22, 10)])
    def test_max_class_keeps_largest_output(self, rng, mode, t):
        fmt = make_format(*t)
        lut = LutSoftmax(fmt, fmt, make_format(18, 8), mode=mode, table_size=256)
        x = FixedArray.quantize(rng.normal(0, 3, (2000, 10)), make_format(18, 8))
        out = lut_softmax(x, lut).raw
        top = np.argmax(x.raw, axis=1)
        np.testing.assert_array_equal(out[np.arange(2000), top], out.max(axis=1))

    def test_table_monotone(self):
        fmt = make_format(18, 8)
        for mode in ("max_subtract", "pairwise"):
            assert np.all(np.diff(LutSoftmax(fmt, fmt, fmt, mode=mode).exp_table) >= 0)

    def test_wrap_table_aliases_large_gaps(self, rng):
        wrap = make_format(18, 8, "truncate", "wrap")
        lut = LutSoftmax(wrap, wrap, wrap, mode="pairwise")
        grid = lut.x_min + np.arange(lut.table_size) * lut.step
        aliased = np.exp(grid) >= wrap.hi
        assert aliased.any() and np.all(lut.exp_table[~aliased] >= 0)
        assert np.any(np.diff(lut.exp_table) < 0)
        x = FixedArray.quantize(rng.normal(0, 3, (2000, 10)), make_format(18, 8))
        flipped = np.argmax(lut_softmax(x, lut).raw, axis=1) != np.argmax(x.raw, axis=1)
        assert 0 < flipped.mean() < 0.5

    def test_deviation_bounded_by_table_step(self, rng):
        io = make_format(18, 8)
        for t in ((18, 8), (22, 10)):
            fmt = make_format(*t)
            lut = LutSoftmax(fmt, fmt, io)
            x = FixedArray.quantize(rng.normal(0, 3, (10_000, 10)), io)
            dev = np.abs(lut_softmax(x, lut).real - softmax(x.real)).max()
            assert dev <= lut.step

    def test_clamps_below_window(self):
        fmt = make_format(18, 8)
        lut = LutSoftmax(fmt, fmt, fmt)
        out = lut_softmax(FixedArray.quantize([0.0, -50.0], fmt), lut).raw
        assert out[1] == lut_softmax(FixedArray.quantize([0.0, -9.0], fmt), lut).raw[1]

    def test_invalid(self):
        fmt = make_format(18, 8)
        with pytest.raises(ValueError):
            LutSoftmax(fmt, fmt, fmt, mode="taylor")
        with pytest.raises(ValueError):
            lut_softmax(FixedArray(np.zeros((1, 0), dtype=np.int64), 10), LutSoftmax(fmt, fmt, fmt))


class TestEngine:
    def test_float_model_generous_precision(self, rng):
        m = random_model(rng, [20, 16, 12, 6])
        x = rng.uniform(-1, 1, (10_000, 20))
        c = compile_model(m, QuantPlan(make_format(32, 16)))
        _, cls = run_batch(c, x)
        np.testing.assert_array_equal(cls, np.argmax(model_forward(m, x), axis=1))

    def test_run_compiled_single(self, rng):
        c = compile_model(build_model([10, 6, 3], variant_config("tnn"), seed=2))
        x = rng.normal(size=(5, 10))
        scores, cls = run_batch(c, x)
        s0, c0 = run_compiled(c, x[0])
        np.testing.assert_array_equal(s0, scores[0])
        assert c0 == cls[0] and isinstance(c0, int)

    def test_ties_lowest_index(self):
        c = compile_model(build_model([4, 3], variant_config("baseline")),
                          QuantPlan(drop_softmax=True))
        _, cls = run_compiled(c, np.zeros(4))  # zero bias, zero input: all scores tie
        assert cls == 0

    def test_width_error(self):
        c = compile_model(build_model([4, 3], variant_config("baseline")))
        with pytest.raises(InputWidthError):
            run_compiled(c, np.zeros(5))
        with pytest.raises(InputWidthError):
            run_compiled(c, np.zeros((2, 4)))

    def test_deterministic_across_threads(self, rng):
        c = compile_model(build_model([30, 20, 5], variant_config("bnn"), seed=4))
        x = rng.normal(size=(3000, 30))
        ref = run_batch(c, x)[0]
        for threads in (1, 2, 4):
            np.testing.assert_array_equal(run_batch(c, x, threads=threads, chunk=257)[0], ref)

    @pytest.mark.parametrize("variant", ["bnn", "tnn", "hybrid_bnn_relu"])
    def test_backends_identical(self, rng, monkeypatch, variant):
        from bnnc.kernels import ops

        c = compile_model(build_model([70, 40, 5], variant_config(variant), seed=6))
        x = rng.normal(size=(200, 70))
        outs = {}
        for name, be in BACKENDS:
            monkeypatch.setattr(ops, "_backend", lambda be=be: be)
            outs[name] = run_batch(c, x)[0]
        for v in outs.values():
            np.testing.assert_array_equal(v, outs["numpy"])

    def test_ternary_rows_type(self):
        assert isinstance(encode_ternary(np.zeros((2, 3))), TernaryRows)
