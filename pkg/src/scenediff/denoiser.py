"""Noise-prediction networks for poses, scaffolds and per-Gaussian latents.

All three take a batch flattened over objects.  The pose network also takes a
scene index per object so that intra-scene attention never crosses scenes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor

TIME_FEATURES = 128
POSE_DIM = 7


@dataclass(frozen=True)
class PoseNetConfig:
    width: int = 128
    blocks: int = 4          # encoder blocks; the decoder mirrors them
    min_width: int = 32
    heads: int = 8
    head_dim: int = 64
    cond_tokens: int = 4
    use_isa: bool = True


@dataclass(frozen=True)
class ShapeNetConfig:
    width: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 6
    heads: int = 4
    head_dim: int = 16
    cond_tokens: int = 4


@dataclass(frozen=True)
class LatentNetConfig:
    width: int = 64
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 4
    head_dim: int = 16


def scene_mask(scene_ids: np.ndarray) -> np.ndarray:
    """Additive attention mask: 0 within a scene, a large negative across scenes."""
    ids = np.asarray(scene_ids)
    return np.where(ids[:, None] == ids[None, :], 0.0, nn.NEG_INF)


class TimeEmbedding(nn.Module):
    def __init__(self, width: int, rng):
        self.fc1 = nn.Linear(TIME_FEATURES, width, rng)
        self.fc2 = nn.Linear(width, width, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        dt = self.fc1.weight.dtype
        feats = Tensor(nn.sinusoidal_embedding(np.asarray(t), TIME_FEATURES).astype(dt))
        return self.fc2(T.silu(self.fc1(feats)))


class ConditionTokens(nn.Module):
    """Splits each condition vector into ``k`` learned tokens of width ``d``."""

    def __init__(self, cond_dim: int, k: int, d: int, rng):
        self.k, self.d = k, d
        self.proj = nn.Linear(cond_dim, k * d, rng)
        self.norm = nn.LayerNorm(d)

    def forward(self, y: Tensor) -> Tensor:
        return self.norm(T.reshape(self.proj(y), (y.shape[0], self.k, self.d)))


def isa(attn: nn.MultiHeadAttention, x: Tensor, scene_ids: np.ndarray) -> Tensor:
    """Intra-scene attention over ``(N, d)`` object features grouped by ``scene_ids``."""
    return attn(x, mask=scene_mask(scene_ids))


class PoseBlock(nn.Module):
    """Time-conditioned residual layer, cross-attention to the object's condition, ISA."""

    def __init__(self, d_in: int, d_out: int, t_dim: int, c_dim: int, cfg: PoseNetConfig, rng):
        self.norm1 = nn.LayerNorm(d_in)
        self.fc1 = nn.Linear(d_in, d_out, rng)
        self.time = nn.Linear(t_dim, d_out, rng)
        self.norm2 = nn.LayerNorm(d_out)
        self.fc2 = nn.Linear(d_out, d_out, rng)
        self.skip = nn.Linear(d_in, d_out, rng) if d_in != d_out else None
        self.norm_c = nn.LayerNorm(d_out)
        self.cross = nn.MultiHeadAttention(d_out, c_dim, cfg.heads, cfg.head_dim, rng)
        self.use_isa = cfg.use_isa
        if cfg.use_isa:
            self.norm_s = nn.LayerNorm(d_out)
            self.isa = nn.MultiHeadAttention(d_out, d_out, cfg.heads, cfg.head_dim, rng)

    def forward(self, x: Tensor, temb: Tensor, ctx: Tensor, scene_ids: np.ndarray) -> Tensor:
        h = self.fc1(T.silu(self.norm1(x)))
        h = T.add(h, self.time(temb))
        h = self.fc2(T.silu(self.norm2(h)))
        x = T.add(self.skip(x) if self.skip is not None else x, h)
        n, d = x.shape
        q = T.reshape(self.norm_c(x), (n, 1, d))
        x = T.add(x, T.reshape(self.cross(q, context=ctx), (n, d)))
        if self.use_isa:
            x = T.add(x, isa(self.isa, self.norm_s(x), scene_ids))
        return x


class PoseDenoiser(nn.Module):
    """1-D UNet over per-object pose tokens.

    Encoder widths halve block by block (floored at ``min_width``); decoder
    blocks consume the matching encoder output through concatenated skips.
    """

    def __init__(self, cond_dim: int, cfg: PoseNetConfig = PoseNetConfig(), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        w = cfg.width
        self.lift = nn.Linear(POSE_DIM, w, rng)
        self.time = TimeEmbedding(w, rng)
        self.cond = ConditionTokens(cond_dim, cfg.cond_tokens, w, rng)
        widths = [max(w >> i, cfg.min_width) for i in range(cfg.blocks)]
        self.encoder = []
        d = w
        for wi in widths:
            self.encoder.append(PoseBlock(d, wi, w, w, cfg, rng))
            d = wi
        self.decoder = []
        for wi in reversed(widths):
            self.decoder.append(PoseBlock(d + wi, wi, w, w, cfg, rng))
            d = wi
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, POSE_DIM, rng, zero=True)

    def forward(self, x_t, t: np.ndarray, y: Tensor, scene_ids: np.ndarray) -> Tensor:
        """``x_t`` ``(N, 7)``, ``t`` ``(N,)``, ``y`` ``(N, cond_dim)`` -> predicted noise ``(N, 7)``."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.lift.weight.dtype))
        n = x.shape[0]
        if y.shape[0] != n or len(np.asarray(t).reshape(-1)) != n or len(scene_ids) != n:
            raise ValueError(f"pose_denoise: {n} objects but condition has {y.shape[0]} rows, "
                             f"t has {np.size(t)}, scene ids {len(scene_ids)}")
        temb = self.time(np.asarray(t).reshape(-1))
        ctx = self.cond(y)
        h = self.lift(x)
        skips = []
        for blk in self.encoder:
            h = blk(h, temb, ctx, scene_ids)
            skips.append(h)
        for blk in self.decoder:
            h = blk(T.concat([h, skips.pop()], axis=1), temb, ctx, scene_ids)
        return self.out(T.silu(self.out_norm(h)))


class TransformerLayer(nn.Module):
    """Pre-norm self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d: int, heads: int, head_dim: int, rng, cross_dim: int | None = None):
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, d, heads, head_dim, rng)
        if cross_dim is not None:
            self.norm_c = nn.LayerNorm(d)
            self.cross = nn.MultiHeadAttention(d, cross_dim, heads, head_dim, rng)
        else:
            self.cross = None
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.MLP(d, 2 * d, d, rng)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        if self.cross is not None:
            x = T.add(x, self.cross(self.norm_c(x), context=context))
        return T.add(x, self.ff(self.norm2(x)))


def _per_token(v: Tensor, tokens: int) -> Tensor:
    """Repeat a per-sample ``(B, d)`` vector over ``tokens`` -> ``(B, tokens, d)``."""
    b, d = v.shape
    return T.reshape(T.take(v, np.repeat(np.arange(b), tokens)), (b, tokens, d))


class ShapeDenoiser(nn.Module):
    """Transformer over the unordered set of Gaussian tokens (no positional encoding).

    The encoder runs over [time token, condition tokens]; decoder layers
    cross-attend to its output.
    """

    def __init__(self, cond_dim: int, token_dim: int = 16, cfg: ShapeNetConfig = ShapeNetConfig(),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.width
        self.inp = nn.Linear(token_dim, d, rng)
        self.time = TimeEmbedding(d, rng)
        self.cond = ConditionTokens(cond_dim, cfg.cond_tokens, d, rng)
        self.encoder = [TransformerLayer(d, cfg.heads, cfg.head_dim, rng) for _ in range(cfg.encoder_layers)]
        self.decoder = [TransformerLayer(d, cfg.heads, cfg.head_dim, rng, cross_dim=d)
                        for _ in range(cfg.decoder_layers)]
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, token_dim, rng, zero=True)

    def forward(self, tokens, t: np.ndarray, y: Tensor) -> Tensor:
        """``tokens`` ``(B, g, 16)``, ``t`` ``(B,)``, ``y`` ``(B, cond_dim)``."""
        x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=self.inp.weight.dtype))
        b, g, _ = x.shape
        if y.shape[0] != b:
            raise ValueError(f"shape_denoise: {b} objects but {y.shape[0]} conditions")
        temb = self.time(np.asarray(t).reshape(-1))
        ctx = T.concat([T.reshape(temb, (b, 1, temb.shape[1])), self.cond(y)], axis=1)
        for layer in self.encoder:
            ctx = layer(ctx)
        h = T.add(self.inp(x), _per_token(temb, g))
        for layer in self.decoder:
            h = layer(h, ctx)
        return self.out(T.silu(self.out_norm(h)))


class LatentDenoiser(nn.Module):
    """Denoises per-Gaussian latents given the clean scaffold tokens.

    Latent token j is tied to scaffold token j by adding the encoded scaffold,
    so only a joint permutation of both sets permutes the output.
    """

    def __init__(self, latent_dim: int = 64, token_dim: int = 16, cfg: LatentNetConfig = LatentNetConfig(),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.width
        self.scaffold_in = nn.Linear(token_dim, d, rng)
        self.latent_in = nn.Linear(latent_dim, d, rng)
        self.time = TimeEmbedding(d, rng)
        self.encoder = [TransformerLayer(d, cfg.heads, cfg.head_dim, rng) for _ in range(cfg.encoder_layers)]
        self.decoder = [TransformerLayer(d, cfg.heads, cfg.head_dim, rng, cross_dim=d)
                        for _ in range(cfg.decoder_layers)]
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, latent_dim, rng, zero=True)

    def forward(self, latents, t: np.ndarray, scaffold_tokens) -> Tensor:
        dt = self.latent_in.weight.dtype
        z = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents, dtype=dt))
        s = scaffold_tokens if isinstance(scaffold_tokens, Tensor) else Tensor(np.asarray(scaffold_tokens, dtype=dt))
        b, g, _ = z.shape
        temb = self.time(np.asarray(t).reshape(-1))
        ctx = self.scaffold_in(s)
        for layer in self.encoder:
            ctx = layer(ctx)
        h = T.add(T.add(self.latent_in(z), ctx), _per_token(temb, g))
        for layer in self.decoder:
            h = layer(h, ctx)
        return self.out(T.silu(self.out_norm(h)))


def randomize_(module: nn.Module, rng: np.random.Generator, std: float = 0.3) -> nn.Module:
    """Overwrite every parameter with noise (used for gradient and equivariance probes)."""
    for p in module.parameters():
        p.data = (p.data + rng.normal(0.0, std, p.shape)).astype(p.dtype)
    return module
