"""Float MLP graph, forward pass, activations and metrics."""

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnnc import nn
from bnnc.nn import (
    Activation,
    BatchNormLayer,
    DenseLayer,
    ModelFormatError,
    ModelGraph,
    ShapeError,
    accuracy,
    activate,
    batchnorm_forward,
    confusion_matrix,
    dense_forward,
    model_forward,
    per_class_accuracy,
    roc_auc,
    softmax,
)
from conftest import random_model


def _naive_matvec(W, b, x):
    out = []
    for i in range(len(W)):
        s = 0.0
        for j in range(len(x)):
            s += W[i][j] * x[j]
        out.append(s + b[i])
    return np.array(out)


class TestDense:
    def test_identity(self):
        x = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(dense_forward(x, DenseLayer(np.eye(3), np.zeros(3))), x)

    def test_hand_example(self):
        assert dense_forward([2.0, 3.0], DenseLayer([[1, 1]], [0])).tolist() == [5.0]

    def test_naive_oracle(self, rng):
        W, b, x = rng.normal(size=(8, 8)), rng.normal(size=8), rng.normal(size=8)
        np.testing.assert_allclose(dense_forward(x, DenseLayer(W, b)), _naive_matvec(W, b, x),
                                   rtol=0, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            dense_forward(np.zeros(3), DenseLayer(np.eye(2), np.zeros(2)))
        with pytest.raises(ShapeError):
            DenseLayer(np.eye(2), np.zeros(3))

    def test_non_finite_rejected(self):
        with pytest.raises(ModelFormatError):
            DenseLayer([[np.nan]], [0.0])

    def test_quantized_effective_weights(self):
        layer = DenseLayer([[0.3, -0.7, 0.0, 0.2]], [0.0], "ternary", delta=0.25)
        assert layer.effective_weights().tolist() == [[1, -1, 0, 0]]
        layer = DenseLayer([[0.3, -0.7, 0.0]], [0.0], "binary")
        assert layer.effective_weights().tolist() == [[1, -1, 1]]


class TestBatchNorm:
    def test_identity_parameters(self):
        eps = 1e-3
        bn = BatchNormLayer([0.0], [1 - eps], [1.0], [0.0], eps)
        np.testing.assert_allclose(batchnorm_forward([0.7], bn), [0.7], rtol=1e-15)

    def test_hand_example(self):
        bn = BatchNormLayer([3.0], [4.0 - 1e-3], [2.0], [1.0], 1e-3)
        np.testing.assert_allclose(batchnorm_forward([5.0], bn), [3.0], rtol=1e-14)

    def test_zero_gamma_constant(self, rng):
        bn = BatchNormLayer([1.0], [2.0], [0.0], [0.25])
        np.testing.assert_array_equal(batchnorm_forward(rng.normal(size=(5, 1)), bn), 0.25)

    def test_scale_shift_form(self, rng):
        bn = BatchNormLayer(rng.normal(size=4), rng.uniform(0.1, 2, 4), rng.normal(size=4),
                            rng.normal(size=4))
        a, c = bn.scale_shift()
        x = rng.normal(size=(6, 4))
        np.testing.assert_allclose(a * x + c, batchnorm_forward(x, bn), atol=1e-12)

    def test_invalid_variance(self):
        with pytest.raises(ModelFormatError):
            BatchNormLayer([0.0], [-1.0], [1.0], [0.0])


class TestActivations:
    def test_binary_tanh(self):
        assert activate([-0.3, 0.0, 2.1], "binary_tanh").tolist() == [-1, 1, 1]

    def test_ternary_tanh(self):
        assert activate([-0.6, 0.2, 0.6], Activation("ternary_tanh", t_a=0.5)).tolist() == [-1, 0, 1]

    def test_clipped_relu(self):
        assert activate([-1.0, 0.4, 3.0], Activation("clipped_relu", y_max=1)).tolist() == [0, 0.4, 1]

    def test_relu_and_none(self):
        assert activate([-1.0, 2.0], "relu").tolist() == [0, 2]
        assert activate([-1.0, 2.0], "none").tolist() == [-1, 2]

    def test_invalid_kind(self):
        with pytest.raises(ModelFormatError):
            Activation("gelu")
        with pytest.raises(ModelFormatError):
            Activation("ternary_tanh", t_a=0)

    def test_softmax_large_inputs_stable(self):
        p = softmax([1000.0, 1000.0])
        np.testing.assert_allclose(p, [0.5, 0.5])


vectors = arrays(np.float64, st.integers(1, 12),
                 elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


class TestActivationProperties:
    @settings(max_examples=200, deadline=None)
    @given(vectors)
    def test_softmax_sums_to_one(self, x):
        assert abs(softmax(x).sum() - 1.0) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(vectors, st.randoms(use_true_random=False))
    def test_softmax_permutation_equivariant(self, x, r):
        perm = list(range(len(x)))
        r.shuffle(perm)
        np.testing.assert_allclose(softmax(x)[perm], softmax(x[perm]), rtol=1e-12, atol=1e-300)

    @settings(max_examples=300, deadline=None)
    @given(vectors)
    def test_softmax_preserves_argmax(self, x):
        assert nn.argmax(softmax(x)) == nn.argmax(x) or softmax(x)[nn.argmax(x)] == softmax(x).max()

    @settings(max_examples=200, deadline=None)
    @given(vectors)
    def test_discrete_tanh_ranges_and_oddness(self, x):
        b = activate(x, "binary_tanh")
        t = activate(x, "ternary_tanh")
        assert set(b.tolist()) <= {-1.0, 1.0}
        assert set(t.tolist()) <= {-1.0, 0.0, 1.0}
        nz = x != 0
        np.testing.assert_array_equal(activate(-x, "binary_tanh")[nz], -b[nz])
        np.testing.assert_array_equal(activate(-x, "ternary_tanh"), -t)


class TestModel:
    def test_identity_model(self, rng):
        m = ModelGraph(4, 4, [DenseLayer(np.eye(4), np.zeros(4))])
        x = rng.normal(size=4)
        np.testing.assert_array_equal(model_forward(m, x), x)

    def test_hand_composition(self):
        m = ModelGraph(2, 2, [DenseLayer([[1, -1], [2, 0.5]], [0.5, -3]), Activation("relu")])
        # [1*1 - 1*2 + 0.5, 2*1 + 0.5*2 - 3] = [-0.5, 0] -> relu
        assert model_forward(m, [1.0, 2.0]).tolist() == [0.0, 0.0]
        assert model_forward(m, [3.0, 1.0]).tolist() == [2.5, 3.5]

    def test_baseline_mnist_shape(self, rng):
        m = random_model(rng, [784, 128, 128, 128, 10], softmax=True)
        assert m.widths() == [784, 128, 128, 128, 10]
        out = model_forward(m, rng.uniform(0, 1, (3, 784)))
        assert out.shape == (3, 10)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ModelGraph(3, 2, [DenseLayer(np.zeros((2, 4)), np.zeros(2))])
        with pytest.raises(ShapeError):
            ModelGraph(4, 3, [DenseLayer(np.zeros((2, 4)), np.zeros(2))])
        m = ModelGraph(4, 2, [DenseLayer(np.zeros((2, 4)), np.zeros(2))])
        with pytest.raises(ShapeError):
            model_forward(m, np.zeros(5))

    def test_trace(self, rng):
        m = random_model(rng, [5, 4, 3])
        x = rng.normal(size=(2, 5))
        out, outs = model_forward(m, x, trace=True)
        assert len(outs) == len(m.layers)
        np.testing.assert_array_equal(outs[-1], out)


class TestMetrics:
    def test_accuracy(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
        assert accuracy([0, 1, 2, 0], [0, 1, 2, 3]) == 0.75
        assert accuracy([1, 2], [0, 0]) == 0.0
        with pytest.raises(ValueError):
            accuracy([], [])

    def test_per_class(self):
        assert per_class_accuracy([0, 1, 1, 1], [0, 0, 1, 1], 0) == 0.75
        assert per_class_accuracy([0, 1, 2], [0, 1, 2], 1) == 1.0
        assert per_class_accuracy([2, 2], [0, 1], 2) == 0.0
        with pytest.raises(ValueError):
            per_class_accuracy([0], [0], 3, classes=3)

    def test_metrics_match_brute_force(self, rng):
        for _ in range(50):
            n, c = rng.integers(1, 30), rng.integers(2, 6)
            pred, lab = rng.integers(0, c, n), rng.integers(0, c, n)
            cm = np.zeros((c, c), dtype=int)
            for p, l in zip(pred, lab):
                cm[l, p] += 1
            np.testing.assert_array_equal(confusion_matrix(pred, lab, c), cm)
            assert accuracy(pred, lab) == np.trace(cm) / n
            for k in range(c):
                tn = cm.sum() - cm[k, :].sum() - cm[:, k].sum() + cm[k, k]
                assert per_class_accuracy(pred, lab, k) == pytest.approx((cm[k, k] + tn) / n)

    def test_confusion_normalized(self):
        cm = confusion_matrix([0, 1, 1, 1], [0, 0, 1, 1], 2, normalize=True)
        np.testing.assert_allclose(cm, [[0.5, 0.5], [0.0, 1.0]])

    def test_roc_auc(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.3] * 4, [0, 1, 0, 1]) == 0.5
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_roc_auc_pairwise_oracle(self, rng):
        for _ in range(30):
            s = rng.integers(0, 5, 25).astype(float)
            y = rng.integers(0, 2, 25).astype(bool)
            if y.all() or not y.any():
                continue
            pairs = [(1.0 if p > q else 0.5 if p == q else 0.0)
                     for p, q in itertools.product(s[y], s[~y])]
            assert roc_auc(s, y) == pytest.approx(np.mean(pairs), abs=1e-12)


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        m = random_model(rng, [6, 5, 3], mode="ternary", act="ternary_tanh", out_bn=True)
        path = tmp_path / "m.json"
        nn.save_model(m, path)
        back = nn.load_model(path)
        assert nn.model_to_dict(back) == nn.model_to_dict(m)
        x = rng.normal(size=(4, 6))
        np.testing.assert_array_equal(model_forward(back, x), model_forward(m, x))

    def test_documented_layout(self, tmp_path):
        doc = {"format": 1, "input_width": 2, "classes": 2, "layers": [
            {"type": "dense", "weights": [[1, 0], [0, 1]], "bias": [0, 0]},
            {"type": "batchnorm", "mu": [0, 0], "var": [1, 1], "gamma": [1, 1], "beta": [0, 0],
             "eps": 1e-3},
            {"type": "activation", "kind": "binary_tanh"}]}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        m = nn.load_model(path)
        assert model_forward(m, [0.5, -0.5]).tolist() == [1.0, -1.0]

    def test_bad_documents(self):
        with pytest.raises(ModelFormatError):
            nn.model_from_dict({"format": 2, "input_width": 1, "classes": 1, "layers": []})
        with pytest.raises(ModelFormatError):
            nn.model_from_dict({"input_width": 1, "classes": 1,
                                "layers": [{"type": "conv"}]})
        with pytest.raises(ModelFormatError):
            nn.model_from_dict({"input_width": 1, "classes": 1, "layers": [{"type": "dense"}]})
