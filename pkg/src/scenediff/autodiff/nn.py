"""Layer building blocks on top of the tensor engine."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Attribute-scanning container: Tensors with ``requires_grad`` are parameters,
    Modules and lists of Modules are children."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02,
                 zero: bool = False, bias: bool = True):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = groups
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., L, H*D)`` -> ``(..., H, L, D)``."""
    *lead, length, width = x.shape
    x = T.reshape(x, (*lead, length, heads, width // heads))
    n = len(lead)
    return T.transpose(x, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dim = x.shape
    n = len(lead)
    x = T.transpose(x, (*range(n), n + 1, n, n + 2))
    return T.reshape(x, (*lead, length, heads * dim))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes."""
    d = q.shape[-1]
    scores = T.affine(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = T.add(scores, T.Tensor(mask.astype(scores.dtype)))
    return T.matmul(T.softmax(scores), v)


class MultiHeadAttention(Module):
    """Multi-head attention with separate query/key widths.

    Inputs are ``(..., Lq, d_q)`` and ``(..., Lk, d_kv)``; the inner width is
    ``heads * head_dim`` and the output is projected back to ``d_q``.
    """

    def __init__(self, d_q: int, d_kv: int, heads: int, head_dim: int, rng, zero_out: bool = False):
        inner = heads * head_dim
        self.heads = heads
        self.q = Linear(d_q, inner, rng, bias=False)
        self.k = Linear(d_kv, inner, rng, bias=False)
        self.v = Linear(d_kv, inner, rng, bias=False)
        self.o = Linear(inner, d_q, rng, zero=zero_out)

    def forward(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(ctx), self.heads)
        v = split_heads(self.v(ctx), self.heads)
        return self.o(merge_heads(attention(q, k, v, mask)))


def conv_index(h: int, w: int, stride: int) -> np.ndarray:
    """im2col gather table for a 3x3 conv with zero padding 1.

    Returns ``(h_out*w_out, 9)`` indices into a flattened ``h*w`` grid; the
    out-of-bounds taps point at index ``h*w`` (an appended zero row).
    """
    rows = []
    for i in range(0, h, stride):
        for j in range(0, w, stride):
            taps = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    y, x = i + di, j + dj
                    taps.append(y * w + x if 0 <= y < h and 0 <= x < w else h * w)
            rows.append(taps)
    return np.asarray(rows, dtype=np.int64)


class Conv3x3(Module):
    """3x3 convolution on channels-last ``(B, H*W, C)`` grids via gather + matmul."""

    def __init__(self, c_in: int, c_out: int, h: int, w: int, stride: int, rng):
        self.h, self.w, self.stride = h, w, stride
        self.c_in = c_in
        self.index = conv_index(h, w, stride)
        self.out_hw = ((h + stride - 1) // stride, (w + stride - 1) // stride)
        self.lin = Linear(9 * c_in, c_out, rng, std=math.sqrt(2.0 / (9 * c_in)))

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        pad = T.Tensor(np.zeros((b, 1, self.c_in), dtype=x.dtype))
        padded = T.concat([x, pad], axis=1)
        cols = T.take(padded, self.index, axis=1)  # (B, HWout, 9, C)
        cols = T.reshape(cols, (b, self.index.shape[0], 9 * self.c_in))
        return self.lin(cols)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer timestep features, ``(N,) -> (N, dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
