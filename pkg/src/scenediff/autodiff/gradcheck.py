"""Central-difference gradient checks (run these in float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))))


def grad_check(f: Callable[..., Tensor], xs: Sequence[np.ndarray] | np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of scalar ``f``.

    ``f`` receives one Tensor per array in ``xs``.
    """
    if isinstance(xs, np.ndarray):
        xs = [xs]
    arrays = [np.array(x, dtype=np.float64) for x in xs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = backward(f(*leaves), leaves)
    worst = 0.0
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            flat[j] = _central(f, arrays, i, j, eps)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst


def _central(f, arrays, i, j, eps) -> float:
    vals = []
    for sign in (1.0, -1.0):
        pert = [a.copy() for a in arrays]
        pert[i].reshape(-1)[j] += sign * eps
        vals.append(float(f(*[Tensor(a) for a in pert]).data))
    return (vals[0] - vals[1]) / (2.0 * eps)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = 8, rng: np.random.Generator | None = None) -> float:
    """Gradient check w.r.t. parameter tensors mutated in place.

    At most ``max_coords`` randomly chosen coordinates per tensor are probed
    (``None`` probes all of them).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    analytic = backward(loss_fn(), list(params))
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn().data)
            flat[j] = orig - eps
            down = float(loss_fn().data)
            flat[j] = orig
            num = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(ga.reshape(-1)[j], num))
    return worst
