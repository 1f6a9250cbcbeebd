"""Distribution-level checks against quadrature and scipy reference laws."""

import numpy as np
import pytest
from scipy import stats

from quadfactor.distributions import (
    PositiveDefiniteError,
    RngStream,
    sample_dirichlet,
    sample_gamma,
    sample_gig,
    sample_inverse_gaussian,
    sample_mvn,
    sample_mvn_precision,
    sample_truncated_normal,
)

from _oracles import (
    density_grid_cdf,
    density_moment,
    gig_logpdf,
    gig_mean_bessel,
)

ALPHA = 1e-3


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def test_rng_stream_reproducible_and_distinct():
    a = RngStream(7, 3).generator.standard_normal(16)
    b = RngStream(7, 3).generator.standard_normal(16)
    c = RngStream(7, 4).generator.standard_normal(16)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


def test_rng_stream_rejects_bad_ids():
    with pytest.raises(ValueError):
        RngStream(-1, 0)
    with pytest.raises(ValueError):
        RngStream(0, 2 ** 64)


# ---------------------------------------------------------------------------
# multivariate normal
# ---------------------------------------------------------------------------

def test_mvn_covariance_form_moments():
    gen = np.random.default_rng(11)
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    mean = np.array([0.5, -0.5])
    draws = np.array([sample_mvn(mean, cov, gen) for _ in range(20000)])
    assert np.max(np.abs(draws.mean(axis=0) - mean)) < 0.05
    assert np.max(np.abs(np.cov(draws.T) - cov)) < 0.05


def test_mvn_precision_form_matches_covariance_form():
    gen = np.random.default_rng(12)
    cov = np.array([[1.5, -0.4], [-0.4, 0.8]])
    prec = np.linalg.inv(cov)
    draws = np.array([sample_mvn(np.zeros(2), prec, gen, form="precision")
                      for _ in range(20000)])
    assert np.max(np.abs(np.cov(draws.T) - cov)) < 0.05


def test_mvn_vanished_covariance_is_point_mass():
    gen = np.random.default_rng(13)
    mean = np.array([1.0, 2.0])
    d = sample_mvn(mean, np.zeros((2, 2)), gen)
    np.testing.assert_array_equal(d, mean)


def test_mvn_rejects_indefinite_matrix():
    gen = np.random.default_rng(14)
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(PositiveDefiniteError):
        sample_mvn(np.zeros(2), bad, gen)


def test_mvn_precision_returns_exact_conditional_mean():
    gen = np.random.default_rng(15)
    prec = np.array([[4.0, 1.0], [1.0, 3.0]])
    rhs = np.array([1.0, -2.0])
    _, mean = sample_mvn_precision(prec, rhs, gen)
    np.testing.assert_allclose(mean, np.linalg.solve(prec, rhs), atol=1e-12)
    draws = np.array([sample_mvn_precision(prec, rhs, gen)[0] for _ in range(20000)])
    np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(prec), atol=0.02)


# ---------------------------------------------------------------------------
# inverse Gaussian
# ---------------------------------------------------------------------------

def test_inverse_gaussian_against_scipy():
    gen = np.random.default_rng(21)
    mu, lam = 1.3, 2.1
    draws = sample_inverse_gaussian(mu, lam, gen, size=20000)
    ref = stats.invgauss(mu / lam, scale=lam)
    assert stats.kstest(draws, ref.cdf).pvalue > ALPHA
    assert abs(draws.mean() - mu) < 4 * np.sqrt(mu ** 3 / lam / 20000)


# ---------------------------------------------------------------------------
# generalized inverse Gaussian
# ---------------------------------------------------------------------------

def test_gig_half_negative_order_reduces_to_inverse_gaussian():
    # GIG(-1/2, a, b) is the inverse Gaussian with mean sqrt(b/a), shape b
    gen = np.random.default_rng(31)
    a, b = 1.0, 2.5
    x = sample_gig(-0.5, a, b, gen, size=20000)
    y = sample_inverse_gaussian(np.sqrt(b / a), b, gen, size=20000)
    res = stats.ks_2samp(x, y)
    assert res.statistic < 0.03
    assert res.pvalue > ALPHA


def test_gig_mean_matches_quadrature():
    gen = np.random.default_rng(32)
    p, a, b = 1.0, 2.0, 2.0
    ref = density_moment(lambda x: gig_logpdf(x, p, a, b), 1e-9, 60.0)
    # the quadrature oracle and the Bessel-ratio closed form must agree
    np.testing.assert_allclose(ref, gig_mean_bessel(p, a, b), rtol=1e-6)
    draws = sample_gig(p, a, b, gen, size=40000)
    assert abs(draws.mean() / ref - 1.0) < 0.02


@pytest.mark.parametrize("p,a,b", [(0.5, 1.0, 1.0), (2.0, 0.3, 4.0),
                                   (-1.5, 3.0, 0.7), (4.0, 2.0, 0.02)])
def test_gig_ks_against_quadrature(p, a, b):
    gen = np.random.default_rng(33)
    draws = sample_gig(p, a, b, gen, size=8000)
    hi = np.quantile(draws, 0.999) * 6 + 1.0
    F = density_grid_cdf(lambda x: gig_logpdf(x, p, a, b), 1e-10, hi)
    assert stats.kstest(draws, F).pvalue > ALPHA


def test_gig_tiny_b_reduces_to_gamma():
    gen = np.random.default_rng(34)
    draws = sample_gig(2.0, 3.0, 1e-15, gen, size=20000)
    assert stats.kstest(draws, stats.gamma(2.0, scale=2.0 / 3.0).cdf).pvalue > ALPHA


def test_gig_vectorized_parameters():
    gen = np.random.default_rng(35)
    b = np.array([[0.5, 1.0, 2.0, 4.0]] * 3)
    draws = sample_gig(-0.5, 1.0, b, gen)
    assert draws.shape == b.shape
    assert np.all(draws > 0)


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

def test_truncated_normal_half_normal_mean():
    gen = np.random.default_rng(41)
    draws = sample_truncated_normal(0.0, 1.0, -np.inf, 0.0, gen, size=20000)
    assert np.all(draws <= 0.0)
    assert abs(draws.mean() + np.sqrt(2.0 / np.pi)) < 0.02


def test_truncated_normal_deep_tail_mean():
    # censoring five sigmas below the location: the Mills-ratio mean
    gen = np.random.default_rng(42)
    mu = 5.0
    draws = sample_truncated_normal(mu, 1.0, -np.inf, 0.0, gen, size=20000)
    assert np.all(draws <= 0.0)
    ref = stats.truncnorm.mean(-np.inf, -mu, loc=mu)
    assert abs(draws.mean() / ref - 1.0) < 0.05


@pytest.mark.parametrize("mu,s2,lo,hi", [
    (0.5, 2.25, -1.0, 2.0),      # two-sided, bulk
    (0.0, 1.0, 6.0, 7.0),        # deep finite upper tail
    (0.0, 1.0, 8.0, np.inf),     # deep infinite tail (rejection path)
    (0.0, 1.0, -np.inf, -8.0),   # reflected deep tail
    (2.0, 4.0, 1.0, np.inf),     # mild one-sided
])
def test_truncated_normal_ks_against_scipy(mu, s2, lo, hi):
    gen = np.random.default_rng(43)
    sd = np.sqrt(s2)
    draws = sample_truncated_normal(mu, s2, lo, hi, gen, size=8000)
    assert np.all(draws >= lo) and np.all(draws <= hi)
    ref = stats.truncnorm((lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd)
    assert stats.kstest(draws, ref.cdf).pvalue > ALPHA


def test_truncated_normal_vector_parameters():
    gen = np.random.default_rng(44)
    mu = np.array([-1.0, 0.0, 3.0, 9.0])
    draws = sample_truncated_normal(mu, 0.25, -np.inf, np.zeros(4), gen)
    assert draws.shape == (4,)
    assert np.all(draws <= 0.0)


# ---------------------------------------------------------------------------
# gamma and Dirichlet
# ---------------------------------------------------------------------------

def test_gamma_moments_shape_rate():
    gen = np.random.default_rng(51)
    draws = sample_gamma(2.0, 4.0, gen, size=80000)
    assert abs(draws.mean() / 0.5 - 1.0) < 0.01
    assert abs(draws.var() / 0.125 - 1.0) < 0.05


def test_gamma_small_shape_stays_positive():
    gen = np.random.default_rng(52)
    draws = sample_gamma(0.25, 0.5, gen, size=200000)
    assert np.all(draws > 0.0)
    assert abs(draws.mean() / 0.5 - 1.0) < 0.02


def test_dirichlet_symmetric_mean_and_simplex():
    gen = np.random.default_rng(53)
    draws = sample_dirichlet(np.ones((10000, 3)), gen)
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(draws.mean(axis=0) - 1.0 / 3.0)) < 0.01


def test_dirichlet_scalar_with_dim():
    draws = sample_dirichlet(2.0, np.random.default_rng(55), dim=4)
    assert draws.shape == (4,)
    assert abs(draws.sum() - 1.0) < 1e-12


def test_dirichlet_tiny_concentration_survives_underflow():
    gen = np.random.default_rng(54)
    draws = sample_dirichlet(np.full((2000, 5), 0.01), gen)
    assert np.all(np.isfinite(draws))
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(draws >= 0.0)
