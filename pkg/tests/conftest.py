"""Shared fixtures: seeded RNG and small random models."""

import os

import numpy as np
import pytest

from bnnc.nn import Activation, BatchNormLayer, DenseLayer, ModelGraph

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.environ.get("BNNC_MNIST_DIR", os.path.join(REPO, "data", "mnist"))
ACCEPTANCE_LINES = []  # filled by test_acceptance, echoed in the terminal summary


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_bn(rng, n, gamma_sign=None):
    gamma = rng.uniform(0.2, 2.0, n) * (rng.choice([-1, 1], n) if gamma_sign is None else gamma_sign)
    return BatchNormLayer(rng.normal(0, 2, n), rng.uniform(0.1, 4, n), gamma,
                          rng.normal(0, 1, n))


def random_model(rng, widths, mode="float", act="relu", out_bn=False, softmax=False,
                 first_act=None):
    """MLP with BN between every dense layer and its activation."""
    layers = [Activation(first_act)] if first_act else []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(DenseLayer(rng.uniform(-1, 1, (b, a)), rng.normal(0, 0.1, b), mode))
        last = i == len(widths) - 2
        if not last:
            layers += [random_bn(rng, b), Activation(act)]
        elif out_bn:
            layers.append(random_bn(rng, b))
    if softmax:
        layers.append(Activation("softmax"))
    return ModelGraph(widths[0], widths[-1], layers)

