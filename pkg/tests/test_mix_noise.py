import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from noisymix.errors import DimensionError, ParameterError
from noisymix.mixing import (MixDraw, NoiseConfig, lambda_tilde_moments, mix, reformulated_perturbation,
                             sample_beta, sample_dirichlet, sample_draw, sample_lambda_tilde, sample_noise,
                             stream)


def _draw(lam, xa, xm):
    return MixDraw(lam, np.asarray(xa, float), np.asarray(xm, float))


# ---- samplers ------------------------------------------------------------------
@pytest.mark.parametrize("a,b,mean", [(1, 1, 0.5), (2, 5, 2 / 7)])
def test_beta_mean(a, b, mean):
    x = sample_beta(a, b, np.random.default_rng(0), size=100_000)
    assert np.all((x >= 0) & (x <= 1))
    assert abs(x.mean() - mean) < 0.01


@pytest.mark.parametrize("a,b", [(0, 1), (1, -2)])
def test_beta_rejects_bad_shapes(a, b):
    with pytest.raises(ParameterError):
        sample_beta(a, b, np.random.default_rng(0))


def test_dirichlet_sums_and_mean():
    w = sample_dirichlet(1.0, 3, np.random.default_rng(1), size=100_000)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1)) <= 1e-12
    assert np.all(np.abs(w.mean(axis=0) - 1 / 3) < 0.01)


def test_dirichlet_k2_is_beta():
    alpha = 0.7
    w = sample_dirichlet(alpha, 2, np.random.default_rng(2), size=10_000)[:, 0]
    b = sample_beta(alpha, alpha, np.random.default_rng(3), size=10_000)
    assert stats.ks_2samp(w, b).pvalue > 0.01


def test_dirichlet_rejects_k1():
    with pytest.raises(ParameterError):
        sample_dirichlet(1.0, 1, np.random.default_rng(0))


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (0.4, 2.0), (3.0, 0.5)])
def test_lambda_tilde_mean_within_3se(a, b):
    lam = sample_lambda_tilde(a, b, np.random.default_rng(4), size=100_000)
    m1, m2 = lambda_tilde_moments(a, b)
    se = (1 - lam).std(ddof=1) / np.sqrt(lam.size)
    assert abs((1 - lam).mean() - m1) <= 3 * se
    assert abs(((1 - lam) ** 2).mean() - m2) <= 3 * ((1 - lam) ** 2).std(ddof=1) / np.sqrt(lam.size)


@pytest.mark.parametrize("family", ["gaussian", "uniform"])
def test_noise_is_zero_mean_unit_variance(family):
    xi = sample_noise(NoiseConfig(family=family), np.random.default_rng(5), (200_000,))
    assert abs(xi.mean()) < 3 / np.sqrt(xi.size) * 1.0
    assert abs(xi.var() - 1.0) < 0.02


def test_draw_permutation_is_bijection():
    d = sample_draw(NoiseConfig(), np.random.default_rng(6), (17, 3))
    assert sorted(d.permutation) == list(range(17))
    assert 0 <= d.lam <= 1
    assert d.xi_add.shape == d.xi_mult.shape == (17, 3)


def test_streams_are_independent_and_reproducible():
    a = stream(7, 0).random(5)
    assert np.array_equal(a, stream(7, 0).random(5))
    assert not np.array_equal(a, stream(7, 1).random(5))


def test_noise_config_validation():
    for kw in ({"alpha": 0}, {"sigma_add": -1}, {"epsilon_scale": -0.1}, {"family": "laplace"}):
        with pytest.raises(ParameterError):
            NoiseConfig(**kw)


def test_draw_lambda_range():
    with pytest.raises(ParameterError):
        MixDraw(1.5, np.zeros(2), np.zeros(2))


# ---- mix ----------------------------------------------------------------------------
def test_mix_examples():
    quiet = NoiseConfig(sigma_add=0, sigma_mult=0)
    x, xp = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    assert np.array_equal(mix(x, xp, _draw(1.0, [0.3, 0.1], [0.2, 0.5]), quiet), x)
    assert np.array_equal(mix(x, xp, _draw(0.5, [0, 0], [0, 0]), quiet), [1.0, 1.0])
    add_only = NoiseConfig(sigma_add=1.0, sigma_mult=0.0)
    assert np.array_equal(mix(np.zeros(2), np.zeros(2), _draw(1.0, [1, -1], [3, 3]), add_only), [1.0, -1.0])


def test_mix_formula(rng):
    cfg = NoiseConfig(sigma_add=0.3, sigma_mult=0.2)
    x, xp = rng.standard_normal(4), rng.standard_normal(4)
    d = _draw(0.3, rng.standard_normal(4), rng.standard_normal(4))
    want = (1 + 0.2 * d.xi_mult) * (0.3 * x + 0.7 * xp) + 0.3 * d.xi_add
    np.testing.assert_allclose(mix(x, xp, d, cfg), want, rtol=1e-15, atol=1e-15)


def test_mix_epsilon_rescale(rng):
    cfg = NoiseConfig(sigma_add=0.3, sigma_mult=0.2, epsilon_scale=0.1)
    x, xp = rng.standard_normal(4), rng.standard_normal(4)
    d = _draw(0.3, rng.standard_normal(4), rng.standard_normal(4))
    lam = 1 - 0.1 * 0.7
    want = (1 + 0.02 * d.xi_mult) * (lam * x + (1 - lam) * xp) + 0.03 * d.xi_add
    np.testing.assert_allclose(mix(x, xp, d, cfg), want, rtol=1e-14, atol=1e-15)


def test_mix_shape_mismatch():
    with pytest.raises(DimensionError):
        mix(np.zeros(2), np.zeros(3), _draw(0.5, np.zeros(2), np.zeros(2)), NoiseConfig())


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_mix_is_linear_without_additive_noise(lam, a, b, seed):
    r = np.random.default_rng(seed)
    x, xp, y, yp = r.standard_normal((4, 5))
    d = _draw(lam, r.standard_normal(5), r.standard_normal(5))
    cfg = NoiseConfig(sigma_add=0.0, sigma_mult=0.4)
    lhs = mix(a * x + b * y, a * xp + b * yp, d, cfg)
    rhs = a * mix(x, xp, d, cfg) + b * mix(y, yp, d, cfg)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_rescaled_mix_converges_linearly(seed):
    r = np.random.default_rng(seed)
    x, xp, xa, xm = r.standard_normal((4, 3))
    lam = float(r.random())
    base = NoiseConfig(sigma_add=0.5, sigma_mult=0.5)
    d = _draw(lam, xa, xm)
    # |mix - x| <= eps * C with C = (1-lam)|x'-x| + s_m|xm x| + s_a|xa| + s_m (1-lam)|xm (x'-x)|
    C = (np.linalg.norm((1 - lam) * (xp - x)) + 0.5 * np.linalg.norm(xm * x) + 0.5 * np.linalg.norm(xa)
         + 0.5 * (1 - lam) * np.linalg.norm(xm * (xp - x)))
    for eps in (1.0, 0.1, 0.01):
        out = mix(x, xp, d, base.with_(epsilon_scale=eps))
        assert np.linalg.norm(out - x) <= C * eps * (1 + 1e-12)


# ---- reformulated perturbation ----------------------------------------------------
def test_reformulated_identities(rng):
    x_i, x_r = rng.standard_normal(3), rng.standard_normal(3)
    d = _draw(0.4, rng.standard_normal(3), rng.standard_normal(3))
    assert np.array_equal(reformulated_perturbation(x_i, x_r, d, NoiseConfig(epsilon_scale=0.0)), x_i)
    quiet = NoiseConfig(sigma_add=0, sigma_mult=0)
    assert np.array_equal(reformulated_perturbation(x_i, x_r, _draw(1.0, d.xi_add, d.xi_mult), quiet), x_i)


def test_reformulated_formula(rng):
    cfg = NoiseConfig(sigma_add=0.3, sigma_mult=0.2, epsilon_scale=0.5)
    x_i, x_r = rng.standard_normal(3), rng.standard_normal(3)
    d = _draw(0.4, rng.standard_normal(3), rng.standard_normal(3))
    e = (1 + 0.5 * 0.2 * d.xi_mult) * 0.6 * (x_r - x_i) + 0.2 * d.xi_mult * x_i + 0.3 * d.xi_add
    np.testing.assert_allclose(reformulated_perturbation(x_i, x_r, d, cfg), x_i + 0.5 * e, rtol=1e-14)
