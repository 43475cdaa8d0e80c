from __future__ import annotations

import mpmath
import numpy as np
import pytest

from scenediff.autodiff import grad_check
from scenediff.autodiff.tensor import Tensor
from scenediff.diffusion import (GuidanceConfig, cfg_epsilon, ddim_sample, ddim_timesteps, ddpm_sample, ddpm_step,
                                 epsilon_loss, make_linear_schedule, maybe_drop_condition, posterior_std,
                                 predict_x0, q_sample)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule()


def _mp_alpha_bar(t, T=1000, b1="0.0001", bT="0.02"):
    with mpmath.workdps(50):
        b1, bT = mpmath.mpf(b1), mpmath.mpf(bT)
        prod = mpmath.mpf(1)
        for s in range(1, t + 1):
            beta = b1 + (bT - b1) * (s - 1) / (T - 1)
            prod *= 1 - beta
        return prod


def test_schedule_endpoints(sched):
    assert sched.T == 1000
    assert sched.beta(1) == pytest.approx(1e-4, abs=1e-15)
    assert sched.beta(1000) == pytest.approx(0.02, abs=1e-15)
    assert sched.alpha_bar(1) == pytest.approx(0.9999, abs=1e-15)
    assert sched.alpha_bar(0) == 1.0


@pytest.mark.parametrize("t", [1, 10, 250, 500, 999, 1000])
def test_alpha_bar_matches_high_precision_product(sched, t):
    ref = _mp_alpha_bar(t)
    assert abs(sched.alpha_bar(t) - float(ref)) / float(ref) < 1e-10


def test_schedule_rejects_bad_t(sched):
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1001, np.zeros(3), sched)
    with pytest.raises(ValueError):
        make_linear_schedule(1000, 0.03, 0.02)


def test_q_sample_zero_noise(sched):
    x0 = np.array([0.3, -1.0, 2.0])
    assert np.allclose(q_sample(x0, 400, np.zeros(3), sched), np.sqrt(sched.alpha_bar(400)) * x0)


def test_q_sample_statistics(sched):
    rng = np.random.default_rng(0)
    n = 100_000
    xt = q_sample(np.zeros(n), sched.T, rng.standard_normal(n), sched)
    assert abs(xt.var() / (1 - sched.alpha_bar(sched.T)) - 1) < 0.02
    x0 = rng.uniform(-1, 1, n)
    xt = q_sample(x0, sched.T, rng.standard_normal(n), sched)
    assert abs(np.corrcoef(x0, xt)[0, 1]) < 0.05


def test_epsilon_loss_values_and_gradient():
    rng = np.random.default_rng(1)
    eps = rng.normal(size=(4, 7))
    assert float(epsilon_loss(Tensor(eps.copy()), eps).data) == 0.0
    assert float(epsilon_loss(Tensor(eps + 1.0), eps).data) == pytest.approx(1.0)
    err = grad_check(lambda e: epsilon_loss(e, eps), [rng.normal(size=(4, 7))])
    assert err < 1e-6


def test_predict_x0_inverts_q_sample(sched):
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    t = np.array([1, 10, 100, 500, 900])
    assert np.allclose(predict_x0(q_sample(x0, t, eps, sched), t, eps, sched), x0, atol=1e-9)


def test_ddpm_step_posterior_mean(sched):
    rng = np.random.default_rng(3)
    x0, eps = rng.normal(size=7), rng.normal(size=7)
    for t in (2, 50, 700):
        xt = q_sample(x0, t, eps, sched)
        ab, ab_prev, b = sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t)
        mean = (np.sqrt(ab_prev) * b / (1 - ab)) * x0 + (np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab)) * xt
        assert np.allclose(ddpm_step(xt, eps, t, sched, np.zeros(7)), mean, atol=1e-10)


def test_ddpm_step_t1_adds_no_noise(sched):
    x = np.ones(7)
    assert posterior_std(1, sched) == 0.0
    assert np.array_equal(ddpm_step(x, x, 1, sched, np.full(7, 100.0)), ddpm_step(x, x, 1, sched, None))


def test_ddpm_chain_recovers_gaussian_data(sched):
    mu0, s0 = 0.7, 0.4

    def oracle(x, t):
        ab = sched.alpha_bar(t)
        return (x - np.sqrt(ab) * mu0) * np.sqrt(1 - ab) / (ab * s0 ** 2 + 1 - ab)

    rng = np.random.default_rng(4)
    x = ddpm_sample(oracle, rng.standard_normal(10_000), sched, rng)
    assert abs(x.mean() - mu0) < 0.05 * abs(mu0)
    assert abs(x.var() / s0 ** 2 - 1) < 0.05


def _toy_eps(x, t, cond):
    return np.tanh(x) * (t / 200.0) + (0.0 if cond is None else 0.1 * cond)


def test_ddim_full_steps_eta1_matches_ddpm():
    sched = make_linear_schedule(200)
    x_T = np.random.default_rng(5).standard_normal(7)
    a = ddpm_sample(lambda x, t: _toy_eps(x, t, None), x_T, sched, np.random.default_rng(6))
    b = ddim_sample(_toy_eps, x_T, sched, steps=200, eta=1.0, rng=np.random.default_rng(6))
    assert np.max(np.abs(a - b)) < 1e-5


def test_ddim_deterministic_eta0():
    sched = make_linear_schedule(200)
    x_T = np.random.default_rng(7).standard_normal(7)
    a = ddim_sample(_toy_eps, x_T, sched, steps=50)
    b = ddim_sample(_toy_eps, x_T, sched, steps=50)
    assert a.tobytes() == b.tobytes()


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 100)
    assert len(ts) == 100 and ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_ddim_guidance_queries_null():
    sched = make_linear_schedule(50)
    seen = []

    def den(x, t, c):
        seen.append(c is None)
        return _toy_eps(x, t, c)

    ddim_sample(den, np.zeros(7), sched, 5, condition=np.ones(7), guidance=GuidanceConfig(weight=2.0))
    assert sum(seen) == 5 and len(seen) == 10


def test_cfg_epsilon():
    c, u = np.ones(3), np.zeros(3)
    assert np.array_equal(cfg_epsilon(c, u, 1.0), c)
    assert np.array_equal(cfg_epsilon(c, u, 0.0), u)
    assert np.array_equal(cfg_epsilon(c, u, 2.0), np.full(3, 2.0))


def test_maybe_drop_condition():
    rng = np.random.default_rng(8)
    y = object()
    assert all(maybe_drop_condition(y, 0.0, rng) is y for _ in range(1000))
    assert all(maybe_drop_condition(y, 1.0, rng) is None for _ in range(1000))
    frac = np.mean([maybe_drop_condition(y, 0.8, rng) is None for _ in range(100_000)])
    assert 0.796 <= frac <= 0.804
    with pytest.raises(ValueError):
        maybe_drop_condition(y, 1.5, rng)


def test_guidance_defaults():
    g = GuidanceConfig()
    assert g.drop_probability == 0.8 and g.weight == 1.0
