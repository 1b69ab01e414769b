import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_condition
from tsflow.gp import (
    DEFAULT_JITTER,
    CovarianceError,
    GaussianDist,
    GPRPrior,
    KernelSpec,
    build_cov,
    cond_prior_sample,
    gp_logpdf_score,
    gp_sample,
    gpr_condition,
    kernel_eval,
    kernel_matrix,
    normalize_times,
)


def test_normalize_times():
    np.testing.assert_allclose(normalize_times([0, 24], 24), [0, math.pi])
    np.testing.assert_array_equal(normalize_times([0], 7), [0.0])
    np.testing.assert_allclose(normalize_times([0, 12, 24], 24), [0, math.pi / 2, math.pi])
    assert np.all(np.diff(normalize_times(np.arange(50), 5)) > 0)
    with pytest.raises(ValueError):
        normalize_times([0], 0)


def test_kernel_values():
    for kind in ("SE", "OU", "PE", "isotropic"):
        assert kernel_eval(KernelSpec(kind), 0.0) == 1.0
    assert kernel_eval(KernelSpec("OU", 1.0), 1.0) == pytest.approx(math.exp(-1), abs=1e-12)
    assert kernel_eval(KernelSpec("PE", 0.7), math.pi) == pytest.approx(1.0, abs=1e-12)
    assert kernel_eval(KernelSpec("SE", 2.0), 1.0) == pytest.approx(math.exp(-1 / 8))
    assert kernel_eval(KernelSpec("isotropic"), 0.3) == 0.0


def test_default_length_scales():
    assert KernelSpec("SE").length_scale == math.sqrt(0.5)
    assert KernelSpec("OU").length_scale == 1.0
    assert KernelSpec("PE").length_scale == math.sqrt(2.0)
    assert KernelSpec("SE").white_noise == DEFAULT_JITTER == 1e-6


def test_kernel_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        KernelSpec("matern")
    with pytest.raises(ValueError):
        KernelSpec("SE", length_scale=0.0)
    with pytest.raises(ValueError):
        KernelSpec("SE", white_noise=-1.0)


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(["SE", "OU", "PE"]), st.floats(0.05, 5.0), st.floats(-20, 20))
def test_kernel_symmetric_and_bounded(kind, ell, d):
    spec = KernelSpec(kind, ell)
    v = kernel_eval(spec, d)
    assert v == kernel_eval(spec, -d)
    assert 0.0 <= v <= 1.0


def test_build_cov_examples():
    cov = build_cov(KernelSpec("isotropic"), [0.0, 0.5, 3.0])
    np.testing.assert_array_equal(cov.matrix, (1 + 1e-6) * np.eye(3))
    cov = build_cov(KernelSpec("OU", 1.0), [0.0, 1.0])
    assert cov.matrix[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)
    assert cov.matrix[0, 0] == 1 + 1e-6
    np.testing.assert_allclose(cov.chol @ cov.chol.T, cov.matrix, atol=1e-14)


def test_build_cov_equals_kernel_pairs():
    t = normalize_times(np.arange(10), 6)
    for kind in ("SE", "OU", "PE"):
        spec = KernelSpec(kind, white_noise=1e-3)
        cov = build_cov(spec, t)
        oracle = np.array([[kernel_eval(spec, a - b) for b in t] for a in t]) + 1e-3 * np.eye(10)
        np.testing.assert_allclose(cov.matrix, oracle, atol=1e-15)


def test_pe_shift_invariance():
    t = normalize_times(np.arange(12), 5)
    a = build_cov(KernelSpec("PE"), t).matrix
    b = build_cov(KernelSpec("PE"), t + math.pi).matrix
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_jitter_escalation():
    # PE over several exact periods is rank deficient; zero white noise must escalate
    t = normalize_times(np.arange(48), 4)
    cov = build_cov(KernelSpec("PE", white_noise=0.0), t)
    assert cov.jitter > 0
    np.testing.assert_allclose(cov.chol @ cov.chol.T, cov.matrix, atol=1e-10)


def test_jitter_escalation_gives_up():
    spec = KernelSpec("SE", white_noise=0.0)
    with pytest.MonkeyPatch.context() as mp:
        import tsflow.gp as gp

        def always_fail(m):
            raise np.linalg.LinAlgError("forced")

        mp.setattr(gp.np.linalg, "cholesky", always_fail)
        with pytest.raises(CovarianceError, match="0.01"):
            gp.build_cov(spec, [0.0, 1.0])


def test_gp_sample_moments():
    cov = build_cov(KernelSpec("isotropic"), np.arange(4.0))
    x = gp_sample(cov, 100_000, 0)
    v = x.var(axis=0)
    assert np.all((v > 0.97) & (v < 1.03))
    dt = math.pi / 24
    ou = build_cov(KernelSpec("OU", 1.0), dt * np.arange(6))
    x = gp_sample(ou, 100_000, 1)
    r = np.corrcoef(x[:, 0], x[:, 1])[0, 1]
    assert abs(r - math.exp(-dt)) < 0.02
    emp = np.cov(x, rowvar=False)
    assert np.abs(emp - ou.matrix).max() < 0.05


def test_gp_sample_deterministic():
    cov = build_cov(KernelSpec("SE"), np.linspace(0, 2, 5))
    assert gp_sample(cov, 7, 42).tobytes() == gp_sample(cov, 7, 42).tobytes()


def test_logpdf_score_examples():
    spec = KernelSpec("isotropic", white_noise=0.0)
    cov = build_cov(spec, [0.0, 1.0])
    logp, score = gp_logpdf_score(cov, np.array([1.0, 2.0]))
    np.testing.assert_allclose(score, [-1.0, -2.0])
    assert logp == pytest.approx(-2.5 - math.log(2 * math.pi), abs=1e-12)
    cov = build_cov(KernelSpec("OU"), [0.0, 0.3, 0.9])
    logp, score = gp_logpdf_score(cov, np.zeros(3))
    np.testing.assert_array_equal(score, np.zeros(3))
    _, logdet = np.linalg.slogdet(cov.matrix)
    assert logp == pytest.approx(-0.5 * logdet - 1.5 * math.log(2 * math.pi), rel=1e-12)


def test_logpdf_matches_dense_formula_and_batches():
    cov = build_cov(KernelSpec("SE", white_noise=1e-2), normalize_times(np.arange(6), 4))
    x = np.random.default_rng(0).normal(size=(3, 6))
    logp, score = gp_logpdf_score(cov, x)
    inv = np.linalg.inv(cov.matrix)
    _, logdet = np.linalg.slogdet(cov.matrix)
    for k in range(3):
        ref = -0.5 * x[k] @ inv @ x[k] - 0.5 * logdet - 3 * math.log(2 * math.pi)
        assert logp[k] == pytest.approx(ref, rel=1e-10)
        np.testing.assert_allclose(score[k], -inv @ x[k], rtol=1e-8, atol=1e-10)
    with pytest.raises(ValueError, match="dimension"):
        gp_logpdf_score(cov, np.zeros(5))


def test_score_finite_differences():
    rng = np.random.default_rng(3)
    for kind in ("SE", "OU", "PE"):
        cov = build_cov(KernelSpec(kind, white_noise=0.05), normalize_times(np.arange(5), 3))
        x = rng.normal(size=5)
        _, score = gp_logpdf_score(cov, x)
        h = 1e-5
        fd = np.array(
            [
                (gp_logpdf_score(cov, x + h * e)[0] - gp_logpdf_score(cov, x - h * e)[0]) / (2 * h)
                for e in np.eye(5)
            ]
        )
        np.testing.assert_allclose(score, fd, rtol=1e-5, atol=1e-7)


def test_gpr_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for trial in range(30):
        kind = ["SE", "OU", "PE"][trial % 3]
        C, P = rng.integers(1, 9, size=2)
        spec = KernelSpec(kind, white_noise=1e-2)
        tp = normalize_times(np.arange(C), 6)
        tf = normalize_times(np.arange(C, C + P), 6)
        y = rng.normal(size=C)
        g = gpr_condition(spec, tp, tf, y)
        mu, cov = dense_condition(spec, tp, tf, y)
        np.testing.assert_allclose(g.mean, mu, atol=1e-8)
        np.testing.assert_allclose(g.cov, cov, atol=1e-8)


def test_gpr_scalar_formula():
    spec = KernelSpec("OU", 1.0, white_noise=0.1)
    g = gpr_condition(spec, [0.0], [0.5], np.array([2.0]))
    k = math.exp(-0.5)
    assert g.mean[0] == pytest.approx(k * 2.0 / 1.1, rel=1e-12)
    assert g.cov[0, 0] == pytest.approx(1.1 - k * k / 1.1, rel=1e-12)


def test_gpr_zero_cross_covariance():
    spec = KernelSpec("SE", 1e-3)
    g = gpr_condition(spec, [0.0, 0.1], [5.0, 6.0], np.array([3.0, -1.0]))
    np.testing.assert_allclose(g.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(g.cov, (1 + 1e-6) * np.eye(2), atol=1e-12)


def test_gpr_reduces_variance_and_is_psd():
    t = normalize_times(np.arange(16), 8)
    for kind in ("SE", "OU", "PE"):
        spec = KernelSpec(kind)
        prior = GPRPrior(spec, t[:8], t[8:])
        ff = kernel_matrix(spec, t[8:], t[8:]) + spec.white_noise * np.eye(8)
        assert np.all(np.diag(prior.cov) <= np.diag(ff) + 1e-10)
        assert np.linalg.eigvalsh(prior.factor @ prior.factor.T).min() >= -1e-8
        np.testing.assert_allclose(prior.factor, np.tril(prior.factor))


def test_cond_prior_sample_mean():
    spec = KernelSpec("OU")
    t = normalize_times(np.arange(6), 4)
    y = np.array([0.5, -1.0, 2.0])
    g = gpr_condition(spec, t[:3], t[3:], y)
    prior = GPRPrior(spec, t[:3], t[3:])
    x = prior.sample(np.repeat(y[None], 100_000, axis=0), np.random.default_rng(0))
    np.testing.assert_allclose(x.mean(axis=0), np.r_[y, g.mean], atol=0.02)
    np.testing.assert_allclose(np.cov(x[:, :3], rowvar=False), np.eye(3), atol=0.02)


def test_cond_prior_sample_degenerate_and_deterministic():
    g = GaussianDist(np.array([1.0, 2.0]), np.zeros((2, 2)))
    x = cond_prior_sample(g, np.array([0.0, 0.0, 0.0]), seed=5)
    np.testing.assert_array_equal(x[3:], [1.0, 2.0])
    assert x.tobytes() == cond_prior_sample(g, np.zeros(3), seed=5).tobytes()
    y = cond_prior_sample(g, np.zeros(3), seed=6)
    assert not np.array_equal(x[:3], y[:3])
