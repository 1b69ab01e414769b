import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsflow.gp import KernelSpec
from tsflow.metrics import (
    QUANTILE_LEVELS,
    QuantileForecast,
    crps,
    lps,
    pinball,
    quantile_losses,
    seasonal_naive,
    wasserstein_study,
    weighted_crps,
)


def test_pinball_examples():
    assert pinball(2.0, 2.0, 0.3) == 0.0
    assert pinball(1.0, 3.0, 0.5) == 1.0
    assert pinball(3.0, 1.0, 0.1) == pytest.approx(1.8, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 0.99), st.floats(0, 1)
)
def test_pinball_nonnegative_and_convex(q1, q2, y, k, lam):
    assert pinball(q1, y, k) >= 0
    mid = pinball(lam * q1 + (1 - lam) * q2, y, k)
    assert mid <= lam * pinball(q1, y, k) + (1 - lam) * pinball(q2, y, k) + 1e-9


def test_crps_degenerate_hand_sum():
    qf = QuantileForecast(QUANTILE_LEVELS, np.zeros((9, 1)))
    # mean over levels of 2 * kappa * 1
    assert crps(qf, np.array([1.0])) == pytest.approx(1.0, abs=1e-15)


def test_crps_point_mass():
    y = np.array([0.3, -1.2, 4.0])
    assert crps(np.tile(y, (20, 1)), y) == 0.0
    assert crps(np.tile(y, (20, 1)), y) < crps(np.tile(y + 1, (20, 1)), y)


def test_crps_grows_with_spread():
    rng = np.random.default_rng(0)
    y = np.zeros(5)
    narrow = crps(rng.normal(0, 0.1, size=(2000, 5)), y)
    wide = crps(rng.normal(0, 1.0, size=(2000, 5)), y)
    assert narrow < wide


def test_quantiles_sorted_and_interpolated():
    qf = QuantileForecast(QUANTILE_LEVELS, np.arange(9.0)[::-1, None])
    np.testing.assert_array_equal(qf.quantiles[:, 0], np.arange(9.0))
    samples = np.arange(11.0)[:, None]
    qf = QuantileForecast.from_samples(samples)
    np.testing.assert_allclose(qf.quantiles[:, 0], np.arange(1.0, 10.0))
    with pytest.raises(ValueError, match="empty"):
        QuantileForecast.from_samples(np.zeros((0, 3)))


def test_quantile_losses_shape():
    assert quantile_losses(np.zeros((10, 4)), np.ones(4)).shape == (9, 4)


def test_weighted_crps_normalization():
    f = [np.zeros((10, 2)), np.zeros((10, 1))]
    ys = [np.array([1.0, -1.0]), np.array([2.0])]
    # each point contributes mean-level loss |y|, so the ratio is 1
    assert weighted_crps(f, ys) == pytest.approx(1.0, abs=1e-12)
    f = [np.tile([1.0, -1.0], (10, 1)), np.zeros((10, 1))]
    assert weighted_crps(f, ys) == pytest.approx(2.0 / 4.0, abs=1e-12)


def _linear_windows(n, C, P, seed):
    y0 = np.random.default_rng(seed).uniform(-5, 5, size=n)
    return y0[:, None] * 0.5 ** np.arange(C + P)


def test_lps_linear_process_near_zero():
    C, P = 4, 4
    train = _linear_windows(200, C, P, 0)
    test = _linear_windows(50, C, P, 1)
    assert lps(train, test[:, :C], test[:, C:], C, P) < 1e-6


def test_lps_white_noise_matches_mean_predictor():
    C, P = 6, 3
    rng = np.random.default_rng(2)
    synth = rng.normal(size=(20_000, C + P))
    test = rng.normal(size=(400, C + P))
    got = lps(synth, test[:, :C], test[:, C:], C, P)
    mean_pred = [np.zeros((1, P)) for _ in test]
    ref = weighted_crps(mean_pred, list(test[:, C:]))
    assert got == pytest.approx(ref, rel=0.02)
    assert got == lps(synth, test[:, :C], test[:, C:], C, P)


def test_lps_rejects_short_samples():
    with pytest.raises(ValueError, match="columns"):
        lps(np.zeros((5, 3)), np.zeros((1, 2)), np.zeros((1, 2)), 2, 2)


def test_seasonal_naive():
    past = np.array([[1.0, 2, 3, 4, 5, 6]])
    np.testing.assert_array_equal(seasonal_naive(past, 5, 3), [[4, 5, 6, 4, 5]])
    with pytest.raises(ValueError):
        seasonal_naive(past, 2, 7)


def _sine_values(n=4, length=600, period=24):
    t = np.arange(length)
    rng = np.random.default_rng(0)
    return [np.sin(2 * np.pi * t / period + rng.uniform(0, 6)) for _ in range(n)]


def test_wasserstein_study_table():
    rows = wasserstein_study(_sine_values(), 24, [KernelSpec("isotropic"), KernelSpec("PE")], [1, 2, 4], batch=16, trials=2)
    assert len(rows) == 6
    assert {(r["kernel"], r["multiple"]) for r in rows} == {(k, m) for k in ("isotropic", "PE") for m in (1, 2, 4)}
    for r in rows:
        assert r["length"] == 24 * r["multiple"]
        assert 0 <= r["ratio"] <= 1 + 1e-12
        assert r["w2"] <= r["random"] + 1e-12
    again = wasserstein_study(_sine_values(), 24, [KernelSpec("isotropic"), KernelSpec("PE")], [1, 2, 4], batch=16, trials=2)
    assert rows == again


def test_wasserstein_study_insufficient_data():
    with pytest.raises(ValueError, match="insufficient"):
        wasserstein_study([np.zeros(30)], 24, [KernelSpec("OU")], [1], batch=16)
