"""Noise schedules, forward noising, reverse samplers and guidance.

Timesteps are 1-based throughout: ``t`` in ``[1, T]`` indexes ``beta[t - 1]``.
``alpha_bar(0)`` is defined as 1 so the last reverse step lands on clean data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        """Cumulative product up to ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")


def make_linear_schedule(T_steps: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T_steps < 2:
        raise ValueError(f"schedule needs T >= 2, got {T_steps}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"invalid beta bounds: beta_1={beta_1}, beta_T={beta_T}")
    t = np.arange(1, T_steps + 1, dtype=np.float64)
    betas = beta_1 + (t - 1.0) / (T_steps - 1.0) * (beta_T - beta_1)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _per_sample(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is scalar or one per leading row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: shape mismatch {x0.shape} vs {eps.shape}")
    schedule.check_t(t)
    ab = _per_sample(schedule.alpha_bar(t), x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def predict_x0(x_t, t, eps_hat, schedule: NoiseSchedule):
    """Closed-form clean-sample estimate; differentiable when ``eps_hat`` is a Tensor."""
    ab = _per_sample(schedule.alpha_bar(t), np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t))
    if isinstance(eps_hat, Tensor):
        xt = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        return T.affine(eps_hat, -np.sqrt(1.0 - ab) / np.sqrt(ab), xt / np.sqrt(ab))
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def epsilon_loss(eps_hat, eps) -> Tensor:
    """Mean squared error over every element."""
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=eps_hat.dtype)
    if eps_hat.shape != eps_arr.shape:
        raise ValueError(f"epsilon_loss: shape mismatch {eps_hat.shape} vs {eps_arr.shape}")
    diff = T.sub(eps_hat, eps if isinstance(eps, Tensor) else Tensor(eps_arr))
    return T.mean(T.mul(diff, diff))


def posterior_std(t: int, schedule: NoiseSchedule) -> float:
    if t == 1:
        return 0.0
    var = schedule.beta(t) * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))
    return float(np.sqrt(var))


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule,
              injected_noise: np.ndarray | None = None) -> np.ndarray:
    schedule.check_t(t)
    a, b, ab = schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)
    mean = (x_t - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    sigma = posterior_std(t, schedule)
    if sigma == 0.0 or injected_noise is None:
        return mean
    return mean + sigma * injected_noise


def ddpm_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray, schedule: NoiseSchedule,
                rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling over all T steps; draws one noise array per step (including t=1)."""
    x = x_T
    for t in range(schedule.T, 0, -1):
        z = rng.standard_normal(x.shape)
        x = ddpm_step(x, eps_fn(x, t), t, schedule, z)
    return x


def ddim_timesteps(T_steps: int, steps: int) -> np.ndarray:
    """Uniformly strided descending subsequence from ``T`` down to 1."""
    if steps > T_steps:
        raise ValueError(f"DDIM steps ({steps}) exceed schedule length ({T_steps})")
    if steps < 1:
        raise ValueError("DDIM needs at least one step")
    if steps == 1:
        return np.array([T_steps])
    return np.unique(np.round(np.linspace(1, T_steps, steps)).astype(np.int64))[::-1]


def cfg_epsilon(eps_cond, eps_uncond, w: float):
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_epsilon: shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    drop_probability: float = 0.8
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.drop_probability}")
        if self.weight < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.weight}")


def ddim_sample(denoiser: Callable, x_T: np.ndarray, schedule: NoiseSchedule, steps: int, eta: float = 0.0,
                condition=None, guidance: GuidanceConfig | None = None,
                rng: np.random.Generator | None = None, clip: float | None = None) -> np.ndarray:
    """DDIM reverse process.

    ``denoiser(x_t, t, condition)`` returns predicted noise; ``condition=None``
    means the null condition.  With a guidance weight other than 1 the model
    is queried twice per step and blended by :func:`cfg_epsilon`.  One noise
    array is drawn per step whenever ``eta > 0`` so that ``steps = T, eta = 1``
    consumes the RNG exactly like :func:`ddpm_sample`.  ``clip`` bounds each
    intermediate clean estimate to ``[-clip, clip]`` (the direction term then
    uses the noise implied by the clipped estimate).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ts = ddim_timesteps(schedule.T, steps)
    w = 1.0 if guidance is None else guidance.weight
    if eta > 0 and rng is None:
        raise ValueError("stochastic DDIM (eta > 0) needs an rng")
    x = np.asarray(x_T, dtype=np.float64)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps = np.asarray(denoiser(x, int(t), condition), dtype=np.float64)
        if condition is not None and w != 1.0:
            eps = cfg_epsilon(eps, np.asarray(denoiser(x, int(t), None), dtype=np.float64), w)
        ab, ab_prev = schedule.alpha_bar(int(t)), schedule.alpha_bar(t_prev)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
        direction = np.sqrt(np.maximum(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
        x = np.sqrt(ab_prev) * x0 + direction
        if eta > 0:
            z = rng.standard_normal(x.shape)
            x = x + sigma * z
    return x


NULL = None  # sentinel for the dropped (null) condition


def maybe_drop_condition(y, p: float, rng: np.random.Generator):
    """Return ``NULL`` with probability ``p``, else ``y`` unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    return NULL if rng.random() < p else y
