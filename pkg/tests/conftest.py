"""Shared helpers: tiny model builders, analytic quadratic oracles, and the
central finite-difference gradient checker used across the suite."""

import numpy as np
import pytest

from flatfed.autodiff import forward_loss
from flatfed.models import Conv, Dense, Flatten, MaxPool, ModelSpec, Relu
from flatfed.tensor import Batch, ParamVector


def tiny_conv_spec(num_classes=3, in_shape=(2, 6, 6)):
    """Small net touching every layer kind: conv, relu, maxpool, flatten, dense."""
    return ModelSpec(
        (Conv(2, 3), Relu(), MaxPool(2), Flatten(), Dense(4), Relu(), Dense(num_classes)),
        in_shape,
        num_classes,
    )


def conv5_spec(num_classes=2):
    """Exercises the 5x5 kernel and 2x2 pooling at CIFAR-like geometry."""
    return ModelSpec(
        (Conv(3, 5), Relu(), MaxPool(2), Flatten(), Dense(num_classes)),
        (2, 9, 9),
        num_classes,
    )


def random_params(spec, rng, scale=0.5):
    return ParamVector(rng.normal(0.0, scale, spec.num_params), spec.manifest)


def random_batch(spec, rng, n=4, soft=False):
    x = rng.normal(0.0, 1.0, (n,) + spec.input_shape)
    if soft:
        y = rng.dirichlet(np.ones(spec.num_classes), size=n)
    else:
        y = rng.integers(0, spec.num_classes, n)
    return Batch(x, y)


def fd_gradient(spec, params, batch, h=1e-5):
    """Central finite differences of the batch loss, coordinate by coordinate."""
    out = np.empty(params.size)
    for i in range(params.size):
        plus = params.data.copy()
        plus[i] += h
        minus = params.data.copy()
        minus[i] -= h
        lp, _ = forward_loss(ParamVector(plus, spec.manifest), spec, batch)
        lm, _ = forward_loss(ParamVector(minus, spec.manifest), spec, batch)
        out[i] = (lp - lm) / (2.0 * h)
    return out


def max_rel_err(a, b, floor=1e-3):
    """Worst per-entry relative error with an absolute floor for tiny entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def quadratic_oracle(a_matrix, b_vec=None):
    """loss = 0.5 x^T A x + b^T x with its analytic gradient."""
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    n = a_matrix.shape[0]
    b_vec = np.zeros(n) if b_vec is None else np.asarray(b_vec, dtype=np.float64)

    def loss(x):
        return 0.5 * float(x @ a_matrix @ x) + float(b_vec @ x)

    def grad(x):
        return a_matrix @ x + b_vec

    return loss, grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
