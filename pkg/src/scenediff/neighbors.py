"""Exact nearest-neighbour queries with a fixed tie-break (lowest source index).

The k-d tree only proposes candidates; the winning squared distance is always
recomputed with :func:`sq_dist`, the same expression the brute-force path
uses, so both routes agree bit for bit.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_BRUTE_CHUNK = 2048


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _check(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0 or len(p) == 0:
        raise ValueError("nearest-neighbour query on an empty point set")
    return q, p


def nearest_brute(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """O(|q| |p|) reference: squared distance and index of each query's nearest source."""
    q, p = _check(q, p)
    dist = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), _BRUTE_CHUNK):
        d = sq_dist(q[s:s + _BRUTE_CHUNK, None, :], p[None, :, :])
        i = np.argmin(d, axis=1)  # first minimum = lowest index
        idx[s:s + _BRUTE_CHUNK] = i
        dist[s:s + _BRUTE_CHUNK] = d[np.arange(len(i)), i]
    return dist, idx


class NearestIndex:
    """Read-only spatial index over a source set; safe to share across queries."""

    def __init__(self, p: np.ndarray):
        self.points = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("nearest-neighbour index over an empty point set")
        self.tree = cKDTree(self.points)

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q, p = _check(q, self.points)
        d, _ = self.tree.query(q, k=1)
        radius = d * (1.0 + 1e-9) + 1e-12
        cand = self.tree.query_ball_point(q, radius)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        qi = np.repeat(np.arange(len(q)), counts)
        pj = np.fromiter((j for c in cand for j in c), dtype=np.int64, count=int(counts.sum()))
        sd = sq_dist(q[qi], p[pj])
        order = np.lexsort((pj, sd, qi))
        first = np.r_[0, np.cumsum(counts)[:-1]]
        win = order[first]
        return sd[win], pj[win]


def nearest(q: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return NearestIndex(p).query(q)
