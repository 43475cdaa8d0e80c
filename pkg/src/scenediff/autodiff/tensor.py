"""Dense tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients.  ``backward`` linearises the graph into a
:class:`GradTape` (reverse topological order) and replays it once.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True
_check_finite = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every forward op."""
    global _check_finite
    _check_finite = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- metadata -------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- tape -----------------------------------------------------------------------


class GradTape:
    """Executed nodes reachable from a root, in topological (execution) order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    With ``leaves`` given, also returns their gradients (zeros when unreached).
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = GradTape(loss)
    grads = tape.replay(np.ones_like(loss.data))
    for node in tape.nodes:
        if not node._parents and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
    if leaves is None:
        return None
    return [grads[id(x)].copy() if id(x) in grads else np.zeros_like(x.data) for x in leaves]


# -- broadcasting helpers ---------------------------------------------------------


def _check_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0 or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: shape mismatch {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_shapes("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_shapes("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_shapes("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_shapes("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def affine(x: Tensor, scale=1.0, shift=0.0) -> Tensor:
    """``x * scale + shift`` with constant (non-differentiated) scale and shift.

    Constants may broadcast freely against ``x``; ``x`` may itself be broadcast
    up to the constants' shape (gradients are summed back).
    """
    scale = np.asarray(scale, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    out = x.data * scale + shift
    shape = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g * scale, shape),), "affine")


# -- unary elementwise ----------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental, no overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, slope * xd)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xd = x.data
    keep = xd >= floor
    return _make(np.where(keep, xd, floor).astype(xd.dtype), (x,), lambda g: (g * keep,), "clamp_min")


# -- shape ops -------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ValueError(f"reshape: cannot reshape {src} to {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast (size-1 axes expanded, leading axes added)."""
    shape = tuple(shape)
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: shape mismatch {ref} vs {x.shape} along axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _is_basic(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in items)


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(key)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "slice")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; with ``axis=0`` this is an embedding lookup."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise IndexError(f"take: index out of range for axis of size {x.shape[ax]}")
    out = np.take(x.data, idx, axis=ax)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        fm = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(fm, idx, gm)
        return (full,)

    return _make(out, (x,), bw, "take")


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


# -- reductions ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return affine(sum_(x, axis, keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2 and a.ndim < 2:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),), "softmax")


# -- normalisation -----------------------------------------------------------------------

VAR_FLOOR = 1e-5


def _normalize(xd: np.ndarray, axes: tuple[int, ...]):
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    floored = var < VAR_FLOOR
    inv = 1.0 / np.sqrt(np.maximum(var, VAR_FLOOR))
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return inv * (g - gm - np.where(floored, 0.0, xhat * gx))

    return xhat, bw


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalise over the last axis; zero-variance rows map to zeros."""
    xhat, bw = _normalize(x.data, (-1,))
    out = _make(xhat.astype(x.dtype, copy=False), (x,), lambda g: (bw(g),), "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Group normalisation for channels-last input ``(B, ..., C)``.

    Statistics run over all non-batch positions and the ``C // groups``
    channels of each group.
    """
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    shape = x.shape
    xd = x.data.reshape(shape[0], -1, groups, c // groups)
    xhat, bw = _normalize(xd, (1, 3))
    out = _make(xhat.reshape(shape).astype(x.dtype, copy=False), (x,),
                lambda g: (bw(g.reshape(xd.shape)).reshape(shape),), "group_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- rotations ---------------------------------------------------------------------------


def polar(m: Tensor) -> Tensor:
    """Orthonormal polar factor of a batch of square matrices ``(..., k, k)``.

    Uses the SVD ``M = W S V^T`` -> ``W V^T``; the backward pass is the
    standard skew-symmetric solve with denominators ``s_i + s_j``.
    """
    w, s, vt = np.linalg.svd(m.data)
    out = w @ vt
    denom = s[..., :, None] + s[..., None, :]
    denom = np.maximum(denom, 1e-12)

    def bw(g):
        gbar = np.swapaxes(w, -1, -2) @ g @ np.swapaxes(vt, -1, -2)
        omega = (gbar - np.swapaxes(gbar, -1, -2)) / denom
        return (w @ omega @ vt,)

    return _make(out, (m,), bw, "polar")


def custom(inputs: Sequence[Tensor], value: np.ndarray, grads_fn: Callable, op: str) -> Tensor:
    """Wrap an externally computed value; ``grads_fn(g)`` returns input gradients."""
    return _make(np.asarray(value), tuple(inputs), grads_fn, op)
