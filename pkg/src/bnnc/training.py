"""Quantization-aware training of float, binary and ternary MLPs.

Binary/ternary layers keep float "shadow" weights clipped to [-1, 1].  The
forward pass sees the quantized weights; gradients reach the shadow weights
through a hard-tanh straight-through estimator.
"""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Activation, BatchNormLayer, DenseLayer, ModelGraph

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# -- configuration -----------------------------------------------------------

@dataclass
class QuantConfig:
    weight_mode: str = "float"  # float | binary | ternary
    delta: float = 0.33
    hidden_activation: str | None = None  # defaults by weight mode
    y_max: float = 1.0
    t_a: float = 0.5
    output_block: str = "softmax_ce"  # softmax_ce | dense_bn_hinge
    hidden_bn: bool | None = None  # defaults: BN for binary/ternary and hybrids

    def __post_init__(self):
        if self.weight_mode not in ("float", "binary", "ternary"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"ternary delta must be in (0, 1), got {self.delta}")
        if self.output_block not in ("softmax_ce", "dense_bn_hinge"):
            raise ValueError(f"unknown output block {self.output_block!r}")
        if self.hidden_activation is None:
            self.hidden_activation = {"float": "relu", "binary": "binary_tanh",
                                      "ternary": "ternary_tanh"}[self.weight_mode]
        if self.hidden_bn is None:
            self.hidden_bn = self.weight_mode != "float"

    def activation(self) -> Activation:
        return Activation(self.hidden_activation, y_max=self.y_max, t_a=self.t_a)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    loss: str | None = None  # hinge | categorical_cross_entropy; None picks by output block
    squared_hinge: bool = True
    lr_decay: float = 1.0  # multiplicative, applied after each epoch
    validation_fraction: float = 0.25
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# The variants studied for each benchmark.  "best_*" share the structure of
# bnn/tnn and differ only in width (see width_search).
VARIANTS = {
    "baseline": QuantConfig("float", output_block="softmax_ce"),
    "bnn": QuantConfig("binary", output_block="dense_bn_hinge"),
    "tnn": QuantConfig("ternary", output_block="dense_bn_hinge"),
    "best_bnn": QuantConfig("binary", output_block="dense_bn_hinge"),
    "best_tnn": QuantConfig("ternary", output_block="dense_bn_hinge"),
    "hybrid_bnn_relu": QuantConfig("binary", hidden_activation="relu",
                                   output_block="dense_bn_hinge"),
    "hybrid_tnn_relu": QuantConfig("ternary", hidden_activation="relu",
                                   output_block="dense_bn_hinge"),
    "hybrid_bnn_clipped_relu": QuantConfig("binary", hidden_activation="clipped_relu",
                                           output_block="dense_bn_hinge"),
    "hybrid_tnn_clipped_relu": QuantConfig("ternary", hidden_activation="clipped_relu",
                                           output_block="dense_bn_hinge"),
}


# Default Adam schedules per variant, tuned on a desk-scale MNIST subset.
RECIPES = {name: dict(lr=3e-2, lr_decay=0.9, epochs=30) for name in VARIANTS}
RECIPES["baseline"] = dict(lr=2e-3, lr_decay=0.9, epochs=30)


def recipe(name: str, **overrides) -> TrainConfig:
    """Training configuration for a variant; keyword arguments override it."""
    if name not in RECIPES:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(RECIPES)}")
    return TrainConfig(**{**RECIPES[name], **overrides})


def variant_config(name: str) -> QuantConfig:
    try:
        return copy.deepcopy(VARIANTS[name])
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


def build_model(arch, quant: QuantConfig, seed: int = 0) -> ModelGraph:
    """Initialise an MLP of widths ``arch = [in, h1, ..., classes]``.

    Hidden blocks are dense [+ BN] + activation; the output block is either
    dense + softmax or dense + BN (no activation).
    """
    arch = [int(a) for a in arch]
    if len(arch) < 2:
        raise ValueError("architecture needs at least input and output widths")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(arch[:-1], arch[1:])):
        last = i == len(arch) - 2
        if quant.weight_mode == "float":
            limit = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, (n_out, n_in))
        else:
            w = rng.uniform(-1.0, 1.0, (n_out, n_in))
        layers.append(DenseLayer(w, np.zeros(n_out), quant.weight_mode, quant.delta))
        if last:
            if quant.output_block == "dense_bn_hinge":
                layers.append(_fresh_bn(n_out))
            else:
                layers.append(Activation("softmax"))
        else:
            if quant.hidden_bn:
                layers.append(_fresh_bn(n_out))
            layers.append(quant.activation())
    return ModelGraph(arch[0], arch[-1], layers, quant=quant.to_dict())


def _fresh_bn(n: int) -> BatchNormLayer:
    return BatchNormLayer(np.zeros(n), np.ones(n), np.ones(n), np.zeros(n), 1e-3)


# -- quantizers and STE ------------------------------------------------------

def binarize_weights(w) -> np.ndarray:
    w = np.asarray(w)
    return np.where(w >= 0, 1, -1).astype(w.dtype if w.dtype.kind == "f" else np.int8)


def ternarize_weights(w, delta: float) -> np.ndarray:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"ternary delta must be in (0, 1), got {delta}")
    w = np.asarray(w)
    out = np.where(np.abs(w) <= delta, 0, np.where(w > 0, 1, -1))
    return out.astype(w.dtype if w.dtype.kind == "f" else np.int8)


def ste_backward(kind: str, shadow_w, upstream_grad) -> np.ndarray:
    """Hard-tanh straight-through gradient: pass where |w| <= 1, zero elsewhere."""
    if kind not in ("binary", "ternary"):
        raise ValueError(f"unknown quantizer kind {kind!r}")
    shadow_w = np.asarray(shadow_w)
    upstream_grad = np.asarray(upstream_grad)
    if shadow_w.shape != upstream_grad.shape:
        raise ValueError("shadow weights and gradient differ in shape")
    return np.where(np.abs(shadow_w) <= 1.0, upstream_grad, 0.0)


# -- losses ------------------------------------------------------------------

def hinge_loss(scores, target_class: int, C: int, squared: bool = True):
    """Per-class hinge against +-1 targets, averaged over classes."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (C,):
        raise ValueError(f"expected {C} scores, got shape {scores.shape}")
    if not 0 <= target_class < C:
        raise ValueError(f"invalid class {target_class}")
    t = -np.ones(C)
    t[target_class] = 1.0
    margin = np.maximum(0.0, 1.0 - t * scores)
    if squared:
        return float(np.sum(margin ** 2) / C), -2.0 * t * margin / C
    return float(np.sum(margin) / C), -t * (margin > 0) / C


def cross_entropy_loss(probs, target: int):
    """Return ``-log p_target`` and the gradient with respect to the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < probs.shape[-1]:
        raise ValueError(f"target {target} out of range")
    grad = probs.copy()
    grad[target] -= 1.0
    return float(-np.log(max(probs[target], 1e-300))), grad


def _batch_hinge(scores, y, squared):
    n, c = scores.shape
    t = -np.ones_like(scores)
    t[np.arange(n), y] = 1.0
    margin = np.maximum(0.0, 1.0 - t * scores)
    if squared:
        return float(np.sum(margin ** 2) / (n * c)), -2.0 * t * margin / (n * c)
    return float(np.sum(margin) / (n * c)), -t * (margin > 0) / (n * c)


def _batch_ce(logits, y):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


# -- differentiable network --------------------------------------------------

class TrainableNet:
    """Forward/backward over a ModelGraph's layers, operating in place on a copy.

    ``surrogate=True`` replaces every quantizer by the clipped identity it
    imitates in the backward pass, so the analytic gradient becomes exact and
    can be checked with finite differences.
    """

    def __init__(self, model: ModelGraph, dtype=np.float32, bn_momentum: float = 0.9):
        self.model = copy.deepcopy(model)
        self.dtype = dtype
        self.bn_momentum = bn_momentum
        for layer in self.model.layers:
            if isinstance(layer, DenseLayer):
                layer.weights = layer.weights.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
                if layer.weight_mode != "float":
                    np.clip(layer.weights, -1.0, 1.0, out=layer.weights)
            elif isinstance(layer, BatchNormLayer):
                for k in ("mu", "var", "gamma", "beta"):
                    setattr(layer, k, getattr(layer, k).astype(dtype))
        # softmax at the output is folded into the cross-entropy gradient
        self.body = list(self.model.layers)
        self.has_softmax = bool(self.body) and isinstance(self.body[-1], Activation) \
            and self.body[-1].kind == "softmax"
        if self.has_softmax:
            self.body = self.body[:-1]

    def params(self):
        """Yield ``(layer_index, name, array)`` for each trainable parameter."""
        for i, layer in enumerate(self.body):
            if isinstance(layer, DenseLayer):
                yield i, "weights", layer.weights
                yield i, "bias", layer.bias
            elif isinstance(layer, BatchNormLayer):
                yield i, "gamma", layer.gamma
                yield i, "beta", layer.beta

    def _weights(self, layer: DenseLayer, surrogate: bool):
        if layer.weight_mode == "float":
            return layer.weights
        if surrogate:
            return np.clip(layer.weights, -1.0, 1.0)
        if layer.weight_mode == "binary":
            return binarize_weights(layer.weights)
        return ternarize_weights(layer.weights, layer.delta)

    def forward(self, x, training: bool = False, surrogate: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        for layer in self.body:
            if isinstance(layer, DenseLayer):
                w = self._weights(layer, surrogate)
                caches.append((x, w))
                x = x @ w.T + layer.bias
            elif isinstance(layer, BatchNormLayer):
                if training:
                    m = x.mean(axis=0)
                    v = x.var(axis=0)
                    mom = self.bn_momentum
                    layer.mu[...] = mom * layer.mu + (1 - mom) * m
                    layer.var[...] = mom * layer.var + (1 - mom) * v
                else:
                    m, v = layer.mu, layer.var
                inv = 1.0 / np.sqrt(v + layer.eps)
                xhat = (x - m) * inv
                caches.append((xhat, inv))
                x = xhat * layer.gamma + layer.beta
            else:
                caches.append(x)
                x = self._act(x, layer, surrogate)
        return x, caches

    @staticmethod
    def _act(x, act: Activation, surrogate: bool):
        k = act.kind
        if k == "relu":
            return np.maximum(x, 0)
        if k == "clipped_relu":
            return np.clip(x, 0, act.y_max)
        if k in ("binary_tanh", "ternary_tanh"):
            if surrogate:
                return np.clip(x, -1, 1)
            if k == "binary_tanh":
                return np.where(x >= 0, 1, -1).astype(x.dtype)
            return np.where(x > act.t_a, 1, np.where(x < -act.t_a, -1, 0)).astype(x.dtype)
        if k == "softmax":
            z = np.exp(x - x.max(axis=-1, keepdims=True))
            return z / z.sum(axis=-1, keepdims=True)
        return x

    def backward(self, grad, caches, training: bool = True):
        """Return ``{(layer_index, name): gradient}`` for every parameter."""
        grads = {}
        for i in range(len(self.body) - 1, -1, -1):
            layer, cache = self.body[i], caches[i]
            if isinstance(layer, DenseLayer):
                x, w = cache
                gw = grad.T @ x
                if layer.weight_mode != "float":
                    gw = ste_backward(layer.weight_mode, layer.weights, gw)
                grads[i, "weights"] = gw
                grads[i, "bias"] = grad.sum(axis=0)
                grad = grad @ w
            elif isinstance(layer, BatchNormLayer):
                xhat, inv = cache
                grads[i, "gamma"] = np.sum(grad * xhat, axis=0)
                grads[i, "beta"] = grad.sum(axis=0)
                gx = grad * layer.gamma
                if training:
                    n = gx.shape[0]
                    grad = inv / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
                else:
                    grad = gx * inv
            else:
                x = cache
                k = layer.kind
                if k == "relu":
                    grad = grad * (x > 0)
                elif k == "clipped_relu":
                    grad = grad * ((x > 0) & (x < layer.y_max))
                elif k in ("binary_tanh", "ternary_tanh"):
                    grad = grad * (np.abs(x) <= 1)
                elif k == "softmax":
                    s = self._act(x, layer, False)
                    grad = s * (grad - np.sum(grad * s, axis=-1, keepdims=True))
        return grads

    def loss_and_grads(self, x, y, loss: str, squared_hinge: bool = True,
                       training: bool = True, surrogate: bool = False):
        out, caches = self.forward(x, training=training, surrogate=surrogate)
        if loss == "hinge":
            value, g = _batch_hinge(out, y, squared_hinge)
        else:
            value, g = _batch_ce(out, y)
        return value, self.backward(g.astype(out.dtype), caches, training=training)

    def scores(self, x, batch: int = 4096) -> np.ndarray:
        outs = [self.forward(x[i:i + batch])[0] for i in range(0, len(x), batch)]
        return np.concatenate(outs) if outs else np.zeros((0, self.model.classes))

    def export(self) -> ModelGraph:
        model = copy.deepcopy(self.model)
        for layer in model.layers:
            if isinstance(layer, DenseLayer):
                layer.weights = layer.weights.astype(np.float64)
                layer.bias = layer.bias.astype(np.float64)
            elif isinstance(layer, BatchNormLayer):
                for k in ("mu", "var", "gamma", "beta"):
                    setattr(layer, k, getattr(layer, k).astype(np.float64))
        return model


class _Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.state = {}

    def step(self, net: TrainableNet, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        for i, name, p in net.params():
            g = grads[i, name]
            key = (i, name)
            if cfg.optimizer == "adam":
                m, v = self.state.get(key, (np.zeros_like(p), np.zeros_like(p)))
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                self.state[key] = (m, v)
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                p -= (self.lr * mhat / (np.sqrt(vhat) + 1e-7)).astype(p.dtype)
            else:
                vel = self.state.get(key, np.zeros_like(p))
                vel = cfg.momentum * vel - self.lr * g
                self.state[key] = vel
                p += vel.astype(p.dtype)
        for layer in net.body:
            if isinstance(layer, DenseLayer) and layer.weight_mode != "float":
                np.clip(layer.weights, -1.0, 1.0, out=layer.weights)


def _default_loss(model: ModelGraph) -> str:
    last = model.layers[-1] if model.layers else None
    if isinstance(last, Activation) and last.kind == "softmax":
        return "categorical_cross_entropy"
    return "hinge"


def train(model_template: ModelGraph, quant: QuantConfig | None, cfg: TrainConfig,
          train_set, val_set=None, *, callback=None):
    """Train a copy of ``model_template``; return ``(model, history)``.

    ``train_set`` / ``val_set`` are ``(X, y)`` pairs.  History holds one dict
    per epoch with ``epoch, loss, val_loss, val_acc``.
    """
    X, y = np.asarray(train_set[0], dtype=np.float32), np.asarray(train_set[1], dtype=np.int64)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if X.shape[1] != model_template.input_width:
        raise ValueError(f"training features have width {X.shape[1]}, model expects "
                         f"{model_template.input_width}")
    loss_name = cfg.loss or _default_loss(model_template)
    net = TrainableNet(model_template, np.float32, cfg.bn_momentum)
    opt = _Optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need more than one example
            value, grads = net.loss_and_grads(X[idx], y[idx], loss_name, cfg.squared_hinge)
            if not math.isfinite(value):
                raise TrainingError(epoch)
            opt.step(net, grads)
            total += value * len(idx)
            count += len(idx)
        opt.lr *= cfg.lr_decay
        row = {"epoch": epoch, "loss": total / max(count, 1),
               "val_loss": float("nan"), "val_acc": float("nan")}
        if val_set is not None and len(val_set[0]):
            vx = np.asarray(val_set[0], dtype=np.float32)
            vy = np.asarray(val_set[1], dtype=np.int64)
            out = net.scores(vx)
            if loss_name == "hinge":
                row["val_loss"] = _batch_hinge(out, vy, cfg.squared_hinge)[0]
            else:
                row["val_loss"] = _batch_ce(out, vy)[0]
            row["val_acc"] = float(np.mean(np.argmax(out, axis=1) == vy))
        if not math.isfinite(row["loss"]):
            raise TrainingError(epoch)
        history.append(row)
        log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f", epoch, row["loss"],
                 row["val_loss"], row["val_acc"])
        if callback is not None:
            callback(row)
    model = net.export()
    if quant is not None:
        model.quant = quant.to_dict()
    model.meta = dict(model.meta, train_config=asdict(cfg))
    return model, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_loss", "val_acc"])
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})


# -- architecture search -----------------------------------------------------

@dataclass
class SearchRecord:
    arch: list
    val_loss: float
    val_acc: float


@dataclass
class SearchResult:
    best_arch: list
    records: list = field(default_factory=list)


def width_search(base_arch, quant: QuantConfig, budget: int, cfg: TrainConfig | None = None,
                 train_set=None, val_set=None, candidates: dict | None = None,
                 seed: int = 0, evaluate=None) -> SearchResult:
    """Random search over hidden-layer widths minimising validation loss.

    ``candidates`` maps hidden-layer position (1-based into ``base_arch``) to
    the widths to try; unlisted layers keep their base width.  ``evaluate``
    may replace training with any ``arch -> (val_loss, val_acc)`` callable.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    base_arch = [int(a) for a in base_arch]
    if budget == 1 or not candidates:
        return SearchResult(base_arch, [])
    keys = sorted(candidates)
    for k in keys:
        if not 1 <= k <= len(base_arch) - 2:
            raise ValueError(f"layer position {k} is not a hidden layer")
    space = list(itertools.product(*(candidates[k] for k in keys)))
    rng = np.random.default_rng(seed)
    picks = space if budget >= len(space) else [space[i] for i in
                                                sorted(rng.choice(len(space), budget, replace=False))]
    if evaluate is None:
        if cfg is None or train_set is None or val_set is None:
            raise ValueError("width_search needs cfg, train_set and val_set to train candidates")

        def evaluate(arch):
            model = build_model(arch, quant, seed=cfg.seed)
            _, hist = train(model, quant, cfg, train_set, val_set)
            return hist[-1]["val_loss"], hist[-1]["val_acc"]

    records = []
    for combo in picks:
        arch = list(base_arch)
        for k, wdt in zip(keys, combo):
            arch[k] = int(wdt)
        vl, va = evaluate(arch)
        records.append(SearchRecord(arch, float(vl), float(va)))
    best = min(records, key=lambda r: (r.val_loss, r.arch))
    return SearchResult(best.arch, records)
