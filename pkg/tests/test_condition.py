from __future__ import annotations

import numpy as np
import pytest

from scenediff.autodiff import grad_check_params
from scenediff.autodiff import tensor as T
from scenediff.condition import (ConditionEncoder, FeatureEncoder, ObjectObservation, assemble_condition,
                                 box_embedding_dim, embed_box, embed_class, normalize_box)


def test_box_embedding_layout():
    e = embed_box(np.array([0.25, 0.5, 0.75, 1.0]), 2)
    assert e.shape == (box_embedding_dim(2),) == (20,)
    # first coordinate: raw, sin(pi x), sin(2 pi x), cos(pi x), cos(2 pi x)
    x = 0.25
    assert np.allclose(e[:5], [x, np.sin(np.pi * x), np.sin(2 * np.pi * x), np.cos(np.pi * x), np.cos(2 * np.pi * x)])
    assert embed_box(np.zeros((3, 4))).shape == (3, 84)


def test_normalize_box():
    assert np.allclose(normalize_box([0, 32, 128, 64], 128, 64), [0, 0.5, 1, 1])


def test_embed_class():
    assert np.array_equal(embed_class(2, 4), [0, 0, 1, 0])
    assert embed_class(np.array([0, 3]), 4).shape == (2, 4)
    with pytest.raises(ValueError):
        embed_class(4, 4)


def test_observation_rejects_degenerate_box():
    with pytest.raises(ValueError):
        ObjectObservation(np.array([5, 5, 5, 10]), np.zeros((8, 8, 2)), 0)


def test_feature_encoder_shape_and_errors():
    enc = FeatureEncoder(32, rng=np.random.default_rng(0))
    out = enc(np.random.default_rng(1).random((3, 8, 8, 2)))
    assert out.shape == (3, 32)
    with pytest.raises(ValueError):
        enc(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ValueError):
        FeatureEncoder(40)


def test_condition_width_and_drop():
    enc = ConditionEncoder(32, 5, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    boxes, patches, cls = rng.random((4, 4)), rng.random((4, 8, 8, 2)), np.array([0, 1, 2, 4])
    y = enc(boxes, patches, cls)
    assert y.shape == (4, 84 + 32 + 5) == (4, enc.width)
    drop = np.array([True, False, True, False])
    yd = enc(boxes, patches, cls, drop)
    assert np.allclose(yd.data[0], enc.null.data) and np.allclose(yd.data[1], y.data[1])
    assert np.allclose(enc.null_condition(3).data, np.tile(enc.null.data, (3, 1)))


def test_condition_gradients():
    enc = ConditionEncoder(16, 3, np.random.default_rng(0)).astype(np.float64)
    rng = np.random.default_rng(2)
    boxes, patches, cls = rng.random((3, 4)), rng.random((3, 8, 8, 2)), np.array([0, 1, 2])
    w = T.Tensor(rng.normal(size=(3, enc.width)))
    drop = np.array([False, True, False])

    def loss():
        return T.sum_(T.mul(enc(boxes, patches, cls, drop), w))

    assert grad_check_params(loss, enc.parameters(), max_coords=3) < 1e-4


def test_assemble_condition():
    enc = ConditionEncoder(16, 3, np.random.default_rng(0))
    obs = [ObjectObservation(np.array([0, 0, 64, 64]), np.zeros((8, 8, 2)), 1),
           ObjectObservation(np.array([10, 20, 30, 40]), np.ones((8, 8, 2)), 2)]
    y, dropped = assemble_condition(enc, obs, 128, 128)
    assert y.shape == (2, enc.width) and not dropped
    y, dropped = assemble_condition(enc, obs, 128, 128, np.random.default_rng(0), p=1.0)
    assert dropped and np.allclose(y.data, enc.null_condition(2).data)
    with pytest.raises(ValueError):
        assemble_condition(enc, [], 128, 128)
