"""Float-precision MLP graph, forward evaluation, activations and metrics.

Forward functions accept a single example ``(d,)`` or a batch ``(N, d)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "clipped_relu", "binary_tanh", "ternary_tanh", "softmax", "none")
WEIGHT_MODES = ("float", "binary", "ternary")


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray
    weight_mode: str = "float"
    delta: float = 0.33  # ternarization threshold, only used in ternary mode

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(f"bias has {self.bias.shape[0]} entries, weights have "
                             f"{self.weights.shape[0]} rows")
        if self.weight_mode not in WEIGHT_MODES:
            raise ModelFormatError(f"unknown weight mode {self.weight_mode!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ModelFormatError("dense layer contains non-finite values")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def effective_weights(self) -> np.ndarray:
        """Weights as seen by the forward pass (binarized/ternarized if quantized)."""
        if self.weight_mode == "binary":
            return np.where(self.weights >= 0, 1.0, -1.0)
        if self.weight_mode == "ternary":
            return np.where(np.abs(self.weights) <= self.delta, 0.0, np.sign(self.weights))
        return self.weights


@dataclass
class BatchNormLayer:
    mu: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("mu", "var", "gamma", "beta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        n = self.mu.shape[0]
        if any(getattr(self, k).shape[0] != n for k in ("var", "gamma", "beta")):
            raise ShapeError("batch-norm parameter vectors differ in length")
        if np.any(self.var + self.eps <= 0):
            raise ModelFormatError("batch-norm requires var + eps > 0")

    @property
    def width(self) -> int:
        return self.mu.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var + self.eps)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(a, c)`` with ``y = a*x + c``."""
        a = self.gamma / self.std
        return a, self.beta - self.mu * a


@dataclass(frozen=True)
class Activation:
    kind: str
    y_max: float = 1.0
    t_a: float = 0.5

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {self.kind!r}")
        if self.y_max <= 0 or self.t_a <= 0:
            raise ModelFormatError("y_max and t_a must be positive")


Layer = DenseLayer | BatchNormLayer | Activation


def layer_width_out(layer: Layer, width_in: int) -> int:
    if isinstance(layer, DenseLayer):
        return layer.fan_out
    if isinstance(layer, BatchNormLayer):
        return layer.width
    return width_in


@dataclass
class ModelGraph:
    input_width: int
    classes: int
    layers: list = field(default_factory=list)
    quant: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        width = self.input_width
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, DenseLayer) and layer.fan_in != width:
                raise ShapeError(f"layer {idx}: dense expects {layer.fan_in} inputs, got {width}")
            if isinstance(layer, BatchNormLayer) and layer.width != width:
                raise ShapeError(f"layer {idx}: batch-norm width {layer.width} != {width}")
            width = layer_width_out(layer, width)
        if width != self.classes:
            raise ShapeError(f"model output width {width} != classes {self.classes}")

    def widths(self) -> list[int]:
        """Input width followed by the width of each dense layer's output."""
        return [self.input_width] + [l.fan_out for l in self.layers if isinstance(l, DenseLayer)]

    def dense_layers(self) -> list[DenseLayer]:
        return [l for l in self.layers if isinstance(l, DenseLayer)]


# -- forward -----------------------------------------------------------------

def _check_width(x: np.ndarray, n: int) -> None:
    if x.shape[-1] != n:
        raise ShapeError(f"expected input width {n}, got {x.shape[-1]}")


def dense_forward(x, layer: DenseLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, layer.fan_in)
    return x @ layer.effective_weights().T + layer.bias


def batchnorm_forward(x, layer: BatchNormLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, layer.width)
    return (x - layer.mu) / layer.std * layer.gamma + layer.beta


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activate(x, kind: Activation | str) -> np.ndarray:
    if isinstance(kind, str):
        kind = Activation(kind)
    x = np.asarray(x, dtype=np.float64)
    k = kind.kind
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "clipped_relu":
        return np.minimum(np.maximum(x, 0.0), kind.y_max)
    if k == "binary_tanh":
        return np.where(x >= 0, 1.0, -1.0)
    if k == "ternary_tanh":
        return np.where(x > kind.t_a, 1.0, np.where(x < -kind.t_a, -1.0, 0.0))
    if k == "softmax":
        return softmax(x)
    return x.copy()


def layer_forward(x, layer: Layer) -> np.ndarray:
    if isinstance(layer, DenseLayer):
        return dense_forward(x, layer)
    if isinstance(layer, BatchNormLayer):
        return batchnorm_forward(x, layer)
    return activate(x, layer)


def model_forward(model: ModelGraph, x, *, trace: bool = False):
    """Compose all layers.  With ``trace=True`` also return every layer output."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(x, model.input_width)
    outputs = []
    for layer in model.layers:
        x = layer_forward(x, layer)
        if trace:
            outputs.append(x)
    return (x, outputs) if trace else x


def predict(model: ModelGraph, x) -> np.ndarray:
    return argmax(model_forward(model, np.atleast_2d(x)))


def argmax(scores) -> np.ndarray:
    # np.argmax already breaks ties toward the lowest index
    return np.argmax(np.asarray(scores), axis=-1)


# -- metrics -----------------------------------------------------------------

def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).reshape(-1)
    label = np.asarray(label).reshape(-1)
    if pred.shape != label.shape:
        raise ShapeError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("metrics need at least one example")
    return pred, label


def accuracy(predicted, label) -> float:
    pred, label = _pair(predicted, label)
    return float(np.mean(pred == label))


def per_class_accuracy(predicted, label, c: int, classes: int | None = None) -> float:
    """(TP_c + TN_c) / N for one class."""
    pred, label = _pair(predicted, label)
    if c < 0 or (classes is not None and c >= classes):
        raise ValueError(f"unknown class {c}")
    tp = np.sum((pred == c) & (label == c))
    tn = np.sum((pred != c) & (label != c))
    return float((tp + tn) / pred.size)


def confusion_matrix(predicted, label, classes: int, normalize: bool = False) -> np.ndarray:
    pred, label = _pair(predicted, label)
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (label, pred), 1)
    if normalize:
        rows = cm.sum(axis=1, keepdims=True)
        return cm / np.where(rows == 0, 1, rows)
    return cm


def roc_auc(scores, is_class) -> float:
    """One-vs-rest AUC via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(is_class, dtype=bool).reshape(-1)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average ranks over tied runs
    start = 0
    bounds = np.flatnonzero(np.diff(s)) + 1
    for stop in list(bounds) + [s.size]:
        ranks[start:stop] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    r = np.empty_like(ranks)
    r[order] = ranks
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- serialization -----------------------------------------------------------

def _layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, DenseLayer):
        d = {"type": "dense", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
        if layer.weight_mode != "float":
            d["weight_mode"] = layer.weight_mode
            if layer.weight_mode == "ternary":
                d["delta"] = layer.delta
        return d
    if isinstance(layer, BatchNormLayer):
        return {"type": "batchnorm", "mu": layer.mu.tolist(), "var": layer.var.tolist(),
                "gamma": layer.gamma.tolist(), "beta": layer.beta.tolist(), "eps": layer.eps}
    d = {"type": "activation", "kind": layer.kind}
    if layer.kind == "clipped_relu":
        d["y_max"] = layer.y_max
    if layer.kind == "ternary_tanh":
        d["t_a"] = layer.t_a
    return d


def _layer_from_dict(d: dict, idx: int) -> Layer:
    try:
        t = d["type"]
        if t == "dense":
            return DenseLayer(d["weights"], d["bias"], d.get("weight_mode", "float"),
                              d.get("delta", 0.33))
        if t == "batchnorm":
            return BatchNormLayer(d["mu"], d["var"], d["gamma"], d["beta"], d.get("eps", 1e-3))
        if t == "activation":
            return Activation(d["kind"], d.get("y_max", 1.0), d.get("t_a", 0.5))
    except KeyError as e:
        raise ModelFormatError(f"layer {idx}: missing field {e}") from None
    raise ModelFormatError(f"layer {idx}: unknown layer type {t!r}")


def model_to_dict(model: ModelGraph) -> dict:
    d = {"format": FORMAT_VERSION, "input_width": model.input_width, "classes": model.classes,
         "layers": [_layer_to_dict(l) for l in model.layers]}
    if model.quant is not None:
        d["quant"] = model.quant
    if model.meta:
        d["meta"] = model.meta
    return d


def model_from_dict(d: dict) -> ModelGraph:
    if d.get("format", FORMAT_VERSION) != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {d.get('format')}")
    try:
        layers = [_layer_from_dict(l, i) for i, l in enumerate(d["layers"])]
        return ModelGraph(int(d["input_width"]), int(d["classes"]), layers,
                          d.get("quant"), d.get("meta", {}))
    except KeyError as e:
        raise ModelFormatError(f"model is missing field {e}") from None


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path) -> ModelGraph:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
