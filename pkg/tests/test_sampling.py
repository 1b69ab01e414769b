import logging
import math

import numpy as np
import pytest

from oracles import fd_flow_map_grad, rel_err, tiny_model
from tsflow import net
from tsflow.data import NormStats
from tsflow.gp import GPRPrior, KernelSpec, build_cov, normalize_times
from tsflow.sampling import (
    SamplerConfig,
    ald_loglik_grad,
    build_condition,
    conditional_prior_sampling,
    euler_integrate,
    flow_map,
    flow_map_grad,
    forecast,
    forecast_batch,
    guided_field,
    model_field,
)


def _zero_model(length=8, cond_dim=0):
    cfg = net.ModelConfig(length=length, cond_dim=cond_dim, hidden_dim=8, num_blocks=1, time_embed_dim=8)
    return net.VectorFieldModel.init(cfg, 0)


def test_euler_constant_field_exact():
    for n in (1, 3, 32, 1000):
        assert euler_integrate(lambda t, x: np.ones_like(x), np.zeros(1), n)[0] == pytest.approx(1.0, abs=1e-12)
    assert euler_integrate(lambda t, x: np.ones_like(x), np.zeros(1), 4)[0] == 1.0


def test_euler_linear_field():
    x = euler_integrate(lambda t, x: x, np.ones(1), 1000)[0]
    assert abs(x - math.e) / math.e < 0.005
    errs = [abs(euler_integrate(lambda t, x: x, np.ones(1), n)[0] - math.e) for n in (100, 200, 400)]
    for a, b in zip(errs, errs[1:]):
        assert 1.8 < a / b < 2.2


def test_euler_single_step_and_errors():
    f = lambda t, x: (t + 2.0) * x  # noqa: E731
    np.testing.assert_array_equal(euler_integrate(f, np.array([1.0, 3.0]), 1), [3.0, 9.0])
    with pytest.raises(ValueError):
        euler_integrate(f, np.zeros(2), 0)
    with pytest.raises(FloatingPointError, match="step 1"):
        euler_integrate(lambda t, x: np.full_like(x, np.inf) if t > 0 else x, np.ones(2), 3)


def test_flow_map_zero_model_identity():
    x = np.random.default_rng(0).normal(size=(5, 8))
    model = _zero_model()
    assert flow_map(model, x, steps=4).tobytes() == x.tobytes()
    assert flow_map(model, x, steps=7, t=0.6).tobytes() == x.tobytes()


def test_flow_map_matches_euler():
    model = tiny_model(2)
    x = np.random.default_rng(1).normal(size=8)
    a = flow_map(model, x, steps=6)
    b = euler_integrate(model_field(model), x, 6)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("t0", [0.0, 0.55])
def test_flow_map_input_gradient(t0):
    model = tiny_model(3)
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=8), rng.normal(size=8)
    y, value, g = flow_map_grad(model, x, lambda y: (y @ w, np.broadcast_to(w, y.shape)), steps=4, t=t0)
    np.testing.assert_allclose(y[0], flow_map(model, x, steps=4, t=t0), rtol=1e-14)
    fd = fd_flow_map_grad(model, x, w, 4, t0)
    assert rel_err(g[0], fd) <= 1e-4


def test_flow_map_gradient_conditional():
    model = tiny_model(5, cond_dim=16)
    rng = np.random.default_rng(6)
    x, w, c = rng.normal(size=8), rng.normal(size=8), rng.normal(size=16)
    _, _, g = flow_map_grad(model, x, lambda y: (y @ w, np.broadcast_to(w, y.shape)), c=c, steps=3)
    assert rel_err(g[0], fd_flow_map_grad(model, x, w, 3, c=c)) <= 1e-4


def test_ald_examples():
    ll, g = ald_loglik_grad(np.array([3.0]), np.array([1.0, 7.0]), 0.5)
    assert ll == -1.0
    np.testing.assert_array_equal(g, [0.5, 0.0])
    ll, _ = ald_loglik_grad(np.array([1.0]), np.array([2.0]), 0.9)
    assert ll == pytest.approx(-0.1, abs=1e-15)
    ll, g = ald_loglik_grad(np.array([1.0, 2.0]), np.array([1.0, 2.0, 5.0]), 0.3)
    assert ll == 0.0
    np.testing.assert_array_equal(g, [0.3, 0.3, 0.0])
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            ald_loglik_grad(np.zeros(1), np.zeros(1), bad)


def test_ald_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        C = int(rng.integers(1, 6))
        y, q, k = rng.normal(size=C), rng.normal(size=C + 2), rng.uniform(0.05, 0.95)
        ll, g = ald_loglik_grad(y, q, k)
        assert ll < 0
        h = 1e-6
        fd = [(ald_loglik_grad(y, q + h * e, k)[0] - ald_loglik_grad(y, q - h * e, k)[0]) / (2 * h) for e in np.eye(C + 2)]
        np.testing.assert_allclose(g, fd, atol=1e-6)


def test_ald_rows_with_per_row_kappa():
    y = np.array([[0.0], [0.0]])
    q = np.array([[1.0], [1.0]])
    ll, g = ald_loglik_grad(y, q, np.array([0.2, 0.7]))
    np.testing.assert_allclose(ll, [-0.8, -0.3])
    np.testing.assert_allclose(g[:, 0], [-0.8, -0.3])


def test_guided_field_zero_scale_bit_exact():
    model = tiny_model(1)
    x = np.random.default_rng(0).normal(size=(3, 8))
    f = guided_field(model, np.zeros((3, 4)), 0.0, 0.5)
    assert f(0.3, x).tobytes() == model.forward(0.3, x).tobytes()


def test_guided_field_zero_model_pushes_toward_past():
    model = _zero_model()
    y_p = np.array([1.0, -1.0, 0.5, 0.0])
    x = np.array([0.0, 0.0, 0.5, 2.0, 9.0, 9.0, 9.0, 9.0])
    u = guided_field(model, y_p, 4.0, 0.3)(0.99, x)
    np.testing.assert_allclose(u[0], [4 * 0.3, 4 * (0.3 - 1), 4 * 0.3, 4 * (0.3 - 1), 0, 0, 0, 0])


def test_cps_no_iterations_returns_prior_draw():
    model = tiny_model(0)
    cov = build_cov(KernelSpec("OU"), normalize_times(np.arange(8), 4))
    cfg = SamplerConfig(langevin_iterations=0)
    x0 = np.random.default_rng(0).normal(size=(2, 8))
    out = conditional_prior_sampling(model, cov, np.zeros((2, 4)), cfg, 0, x0=x0)
    assert out.tobytes() == x0.tobytes()


def test_cps_deterministic_and_shaped():
    model = tiny_model(0)
    cov = build_cov(KernelSpec("OU"), normalize_times(np.arange(8), 4))
    y = np.random.default_rng(1).normal(size=(3, 4))
    a = conditional_prior_sampling(model, cov, y, SamplerConfig(), 7)
    b = conditional_prior_sampling(model, cov, y, SamplerConfig(), 7)
    assert a.shape == (3, 8) and a.tobytes() == b.tobytes()
    assert not np.array_equal(a, conditional_prior_sampling(model, cov, y, SamplerConfig(), 8))


def test_cps_long_run_concentrates_near_observation():
    model = _zero_model(length=4)
    cov = build_cov(KernelSpec("isotropic"), np.arange(4.0))
    y = np.array([2.0, -1.5, 1.0, 3.0])
    n = 200
    prior = np.random.default_rng(0).standard_normal((n, 4))
    cfg = SamplerConfig(langevin_iterations=10_000, langevin_step=1e-3, langevin_noise=1.0, inner_ode_steps=1, quantile=0.5)
    x = conditional_prior_sampling(model, cov, np.tile(y, (n, 1)), cfg, 1, x0=prior)
    d_post = np.linalg.norm(x - y, axis=1).mean()
    d_prior = np.linalg.norm(prior - y, axis=1).mean()
    assert d_post < d_prior


def test_cps_warns_on_stiff_prior(caplog):
    model = _zero_model()
    cov = build_cov(KernelSpec("SE"), normalize_times(np.arange(8), 24))
    with caplog.at_level(logging.WARNING, logger="tsflow.sampling"):
        conditional_prior_sampling(model, cov, np.zeros(4), SamplerConfig(langevin_iterations=1), 0)
    assert "unstable" in caplog.text
    caplog.clear()
    ou = build_cov(KernelSpec("OU"), normalize_times(np.arange(8), 24))
    with caplog.at_level(logging.WARNING, logger="tsflow.sampling"):
        conditional_prior_sampling(model, ou, np.zeros(4), SamplerConfig(langevin_iterations=1), 0)
    assert "unstable" not in caplog.text


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(ode_steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(langevin_step=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1.0)
    with pytest.raises(ValueError):
        SamplerConfig(quantile=1.5)
    cfg = SamplerConfig()
    assert (cfg.ode_steps, cfg.langevin_iterations, cfg.langevin_step, cfg.langevin_noise) == (32, 4, 1e-3, 0.01)
    assert (cfg.inner_ode_steps, cfg.guidance_scale, cfg.n_samples) == (4, 4.0, 100)


def test_build_condition_layout():
    c = build_condition(np.array([[1.0, 2.0]]), 3)
    np.testing.assert_array_equal(c, [[1, 2, 0, 0, 0, 1, 1, 0, 0, 0]])
    c = build_condition(np.array([1.0, 2.0]), 1, lag_features=np.array([[7.0, 8.0]]))
    np.testing.assert_array_equal(c, [[1, 2, 0, 1, 1, 0, 7, 8]])


def _grid(C=4, P=4, period=4):
    t = normalize_times(np.arange(C + P), period)
    return t[:C], t[C:]


def test_forecast_shapes_both_modes():
    tp, tf = _grid()
    y = np.random.default_rng(0).normal(size=(2, 4))
    cond = tiny_model(0, cond_dim=16)
    out = forecast_batch(cond, y, 5, "cond-direct", SamplerConfig(ode_steps=4), prior=GPRPrior(KernelSpec("OU"), tp, tf))
    assert out.shape == (2, 5, 4) and np.isfinite(out).all()
    unc = tiny_model(0)
    cov = build_cov(KernelSpec("OU"), np.r_[tp, tf])
    out = forecast_batch(unc, y, 3, "uncond-cps-guided", SamplerConfig(ode_steps=4), prior=cov)
    assert out.shape == (2, 3, 4) and np.isfinite(out).all()
    assert forecast_batch(unc, y, 0, "uncond-cps-guided", SamplerConfig(), prior=cov).shape == (2, 0, 4)


def test_forecast_deterministic():
    tp, tf = _grid()
    model = tiny_model(0, cond_dim=16)
    prior = GPRPrior(KernelSpec("OU"), tp, tf)
    a = forecast(model, np.ones(4), 1, prior=prior, seed=3)
    b = forecast(model, np.ones(4), 1, prior=prior, seed=3)
    assert a.shape == (1, 4) and a.tobytes() == b.tobytes()


def test_forecast_mode_errors():
    tp, tf = _grid()
    prior = GPRPrior(KernelSpec("OU"), tp, tf)
    cov = build_cov(KernelSpec("OU"), np.r_[tp, tf])
    with pytest.raises(ValueError, match="conditional"):
        forecast(tiny_model(0), np.zeros(4), 2, "cond-direct", prior=prior)
    with pytest.raises(ValueError, match="unconditional"):
        forecast(tiny_model(0, cond_dim=16), np.zeros(4), 2, "uncond-cps-guided", prior=cov)
    with pytest.raises(ValueError, match="unknown"):
        forecast(tiny_model(0), np.zeros(4), 2, "ddpm", prior=cov)
    with pytest.raises(TypeError):
        forecast(tiny_model(0, cond_dim=16), np.zeros(4), 2, "cond-direct", prior=cov)


def test_forecast_degenerate_is_posterior_mean():
    tp, tf = _grid()
    prior = GPRPrior(KernelSpec("OU"), tp, tf)
    prior.factor = np.zeros_like(prior.factor)
    y = np.array([0.5, -0.2, 1.0, 0.3])
    stats = NormStats("mean-scale", scale=2.0)
    out = forecast(_zero_model(cond_dim=16), y, 3, prior=prior, stats=stats)
    expect = 2.0 * (np.tile(y, (3, 1)) @ prior.projection.T)
    np.testing.assert_array_equal(out, expect)
