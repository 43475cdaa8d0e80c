"""Scalar probes for every forward op, used by the gradient suites.

Each entry maps an op name to ``(f, make_inputs)``: ``make_inputs(rng)``
returns float64 arrays and ``f`` reduces the op output to a scalar through
a fixed random projection so that every output coordinate matters.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _probe(y: Tensor) -> Tensor:
    w = np.random.default_rng(1234).normal(size=y.shape)
    return T.sum_(T.mul(y, Tensor(w)))


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


CATALOGUE = {
    "add": (lambda a, b: _probe(T.add(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: _probe(T.sub(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "multiply": (lambda a, b: _probe(T.mul(a, b)), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))]),
    "divide": (lambda a, b: _probe(T.div(a, b)), lambda r: [r.normal(size=(3, 4)), 1.5 + r.random((3, 4))]),
    "matmul": (lambda a, b: _probe(T.matmul(a, b)), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "batched_matmul": (lambda a, b: _probe(T.matmul(a, b)),
                       lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))]),
    "weight_matmul": (lambda a, b: _probe(T.matmul(a, b)),
                      lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "transpose": (lambda a: _probe(T.transpose(a, (1, 2, 0))), lambda r: [r.normal(size=(2, 3, 4))]),
    "reshape": (lambda a: _probe(T.reshape(a, (4, 6))), lambda r: [r.normal(size=(2, 3, 4))]),
    "concatenate": (lambda a, b: _probe(T.concat([a, b], axis=1)),
                    lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 5))]),
    "slice": (lambda a: _probe(a[1:, ::2]), lambda r: [r.normal(size=(4, 5))]),
    "fancy_slice": (lambda a: _probe(a[np.array([0, 2, 2, 1])]), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda a: _probe(T.softmax(a)), lambda r: [r.normal(size=(3, 5))]),
    "sigmoid": (lambda a: _probe(T.sigmoid(a)), lambda r: [r.normal(size=(3, 4)) * 3]),
    "silu": (lambda a: _probe(T.silu(a)), lambda r: [r.normal(size=(3, 4)) * 3]),
    "leaky_relu": (lambda a: _probe(T.leaky_relu(a)), lambda r: [_away_from_zero(r, (3, 4))]),
    "layer_norm": (lambda a, w, b: _probe(T.layer_norm(a, w, b)),
                   lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "group_norm": (lambda a, w, b: _probe(T.group_norm(a, 2, w, b)),
                   lambda r: [r.normal(size=(2, 5, 4)), r.normal(size=(4,)), r.normal(size=(4,))]),
    "sum": (lambda a: _probe(T.sum_(a, axis=1)), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: _probe(T.mean(a, axis=0, keepdims=True)), lambda r: [r.normal(size=(3, 4))]),
    "affine": (lambda a: _probe(T.affine(a, np.array([[0.5], [-2.0], [3.0]]), 1.0)),
               lambda r: [r.normal(size=(3, 4))]),
    "embedding": (lambda a: _probe(T.embedding(a, np.array([[0, 2], [2, 1]]))), lambda r: [r.normal(size=(3, 4))]),
    "take_axis1": (lambda a: _probe(T.take(a, np.array([[0, 3], [3, 3]]), axis=1)),
                   lambda r: [r.normal(size=(2, 4, 3))]),
    "exp": (lambda a: _probe(T.exp(a)), lambda r: [r.normal(size=(3, 4))]),
    "log": (lambda a: _probe(T.log(a)), lambda r: [0.5 + r.random((3, 4))]),
    "sqrt": (lambda a: _probe(T.sqrt(a)), lambda r: [0.5 + r.random((3, 4))]),
    "sin": (lambda a: _probe(T.sin(a)), lambda r: [r.normal(size=(3, 4))]),
    "cos": (lambda a: _probe(T.cos(a)), lambda r: [r.normal(size=(3, 4))]),
    "softplus": (lambda a: _probe(T.softplus(a)), lambda r: [r.normal(size=(3, 4)) * 3]),
    "clamp_min": (lambda a: _probe(T.clamp_min(a, 0.1)), lambda r: [_away_from_zero(r, (3, 4)) + 0.1]),
    "broadcast_to": (lambda a: _probe(T.broadcast_to(a, (2, 3, 4))), lambda r: [r.normal(size=(3, 1))]),
    "polar": (lambda a: _probe(T.polar(a)), lambda r: [np.eye(3) + 0.3 * r.normal(size=(2, 3, 3))]),
}
