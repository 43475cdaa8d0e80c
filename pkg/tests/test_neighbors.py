from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenediff.neighbors import NearestIndex, nearest, nearest_brute


@pytest.mark.parametrize("seed", range(10))
def test_tree_matches_brute_bitwise(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(rng.integers(1, 400), 3))
    p = rng.normal(size=(rng.integers(1, 400), 3))
    d1, i1 = nearest(q, p)
    d2, i2 = nearest_brute(q, p)
    assert np.array_equal(i1, i2)
    assert d1.tobytes() == d2.tobytes()


def test_ties_pick_lowest_index():
    p = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    q = np.zeros((1, 3))
    assert nearest(q, p)[1][0] == 0
    assert nearest_brute(q, p)[1][0] == 0
    # duplicate source points
    d, i = nearest(np.array([[1.0, 0, 0]]), p)
    assert i[0] == 0 and d[0] == 0.0


def test_grid_ties():
    ax = np.arange(4.0)
    p = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    q = p[:-1] + 0.5
    assert np.array_equal(nearest(q, p)[1], nearest_brute(q, p)[1])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.integers(-3, 3).map(float)),
       arrays(np.float64, (7, 3), elements=st.integers(-3, 3).map(float)))
def test_integer_lattice_agreement(p, q):
    # small integer coordinates produce many exact ties
    d1, i1 = nearest(q, p)
    d2, i2 = nearest_brute(q, p)
    assert np.array_equal(i1, i2) and np.array_equal(d1, d2)


def test_empty_inputs():
    with pytest.raises(ValueError):
        NearestIndex(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        nearest_brute(np.zeros((0, 3)), np.ones((2, 3)))


def test_index_reusable():
    rng = np.random.default_rng(3)
    idx = NearestIndex(rng.normal(size=(50, 3)))
    q = rng.normal(size=(20, 3))
    a = idx.query(q)
    b = idx.query(q)
    assert np.array_equal(a[1], b[1])
