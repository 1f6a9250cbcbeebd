"""Deterministic model math: factor moments, induced coefficients of every
order, k selection, the rank-truncation KL bound, and the induced prior."""

import numpy as np
import pytest

from quadfactor.model import (
    factor_posterior_moments,
    induced_coefficients,
    induced_higher_order,
    kl_bound_check,
    random_orthogonal,
    response_predictor_covariance,
    select_k,
    simulate_induced_prior,
)

from _oracles import gauss_hermite_poly_mean, quadratic_mc_mean


def _random_instance(gen, p, k):
    lam = gen.standard_normal((p, k))
    psi = gen.uniform(0.5, 2.0, size=p)
    omega = gen.standard_normal(k)
    W = gen.standard_normal((k, k))
    Omega = 0.5 * (W + W.T)
    return lam, psi, omega, Omega


# ---------------------------------------------------------------------------
# factor posterior moments
# ---------------------------------------------------------------------------

def test_moments_no_information_limit():
    mom = factor_posterior_moments(np.zeros((3, 2)), np.ones(3))
    np.testing.assert_allclose(mom.V, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(mom.A, np.zeros((2, 3)), atol=1e-14)


def test_moments_identity_case():
    mom = factor_posterior_moments(np.eye(2), np.ones(2))
    np.testing.assert_allclose(mom.V, 0.5 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(mom.A, 0.5 * np.eye(2), atol=1e-14)


def test_moments_match_dense_solve():
    gen = np.random.default_rng(0)
    lam = gen.standard_normal((4, 2))
    psi = np.array([1.0, 2.0, 3.0, 4.0])
    mom = factor_posterior_moments(lam, psi)
    prec = lam.T @ np.diag(1.0 / psi) @ lam + np.eye(2)
    V_ref = np.linalg.inv(prec)
    np.testing.assert_allclose(mom.V, V_ref, atol=1e-10)
    np.testing.assert_allclose(mom.A, V_ref @ lam.T @ np.diag(1.0 / psi), atol=1e-10)
    mom.validate()


def test_moments_eigenvalues_contract():
    gen = np.random.default_rng(1)
    for scale in (1e-3, 1.0, 1e3):
        lam = scale * gen.standard_normal((6, 3))
        w = np.linalg.eigvalsh(factor_posterior_moments(lam, np.ones(6)).V)
        assert w.min() > 0.0 and w.max() <= 1.0 + 1e-12


def test_moments_rejects_bad_noise():
    with pytest.raises(ValueError):
        factor_posterior_moments(np.eye(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        factor_posterior_moments(np.eye(2), np.ones(3))


# ---------------------------------------------------------------------------
# induced coefficients
# ---------------------------------------------------------------------------

def test_induced_linear_submodel():
    gen = np.random.default_rng(2)
    lam, psi, omega, _ = _random_instance(gen, 5, 3)
    mom = factor_posterior_moments(lam, psi)
    ind = induced_coefficients(mom, omega, np.zeros((3, 3)))
    assert ind.intercept == 0.0
    np.testing.assert_allclose(ind.beta, mom.A.T @ omega, atol=1e-14)
    np.testing.assert_array_equal(ind.omega_x, np.zeros((5, 5)))


def test_induced_hand_example():
    # Lam = I, Psi = I gives A = V = I/2; omega = (2,2), Omega = I then
    # yields intercept tr(V) = 1, beta = (1,1), interaction matrix I/4
    mom = factor_posterior_moments(np.eye(2), np.ones(2))
    ind = induced_coefficients(mom, np.array([2.0, 2.0]), np.eye(2))
    assert abs(ind.intercept - 1.0) < 1e-14
    np.testing.assert_allclose(ind.beta, np.array([1.0, 1.0]), atol=1e-14)
    np.testing.assert_allclose(ind.omega_x, 0.25 * np.eye(2), atol=1e-14)


def test_induced_conditional_mean_matches_monte_carlo():
    gen = np.random.default_rng(3)
    lam, psi, omega, Omega = _random_instance(gen, 4, 2)
    mom = factor_posterior_moments(lam, psi)
    ind = induced_coefficients(mom, omega, Omega)
    for _ in range(10):
        x = gen.standard_normal(4)
        est, se = quadratic_mc_mean(mom.A, mom.V, omega, Omega, x, 10 ** 6, gen)
        exact = float(ind.conditional_mean(x)[0])
        assert abs(exact - est) < 3.0 * se


def test_induced_covariate_block_and_errors():
    gen = np.random.default_rng(4)
    lam, psi, omega, Omega = _random_instance(gen, 5, 3)
    mom = factor_posterior_moments(lam, psi)
    Delta = gen.standard_normal((3, 2))
    ind = induced_coefficients(mom, omega, Omega, Delta=Delta)
    np.testing.assert_allclose(ind.covint, mom.A.T @ Delta, atol=1e-14)
    with pytest.raises(ValueError):
        induced_coefficients(mom, omega[:2], Omega)
    with pytest.raises(ValueError):
        induced_coefficients(mom, omega, np.triu(Omega) + 1.0)


def test_response_predictor_covariance_is_lambda_omega():
    gen = np.random.default_rng(5)
    lam = gen.standard_normal((6, 2))
    omega = gen.standard_normal(2)
    np.testing.assert_allclose(response_predictor_covariance(lam, omega),
                               lam @ omega, atol=1e-14)


def test_rotation_invariance_of_induced_coefficients():
    gen = np.random.default_rng(6)
    lam, psi, omega, Omega = _random_instance(gen, 8, 3)
    mom = factor_posterior_moments(lam, psi)
    ref = induced_coefficients(mom, omega, Omega)
    for _ in range(20):
        P = random_orthogonal(3, gen)
        mom_r = factor_posterior_moments(lam @ P, psi)
        rot = induced_coefficients(mom_r, P.T @ omega, P.T @ Omega @ P)
        assert abs(rot.intercept - ref.intercept) < 1e-10
        assert np.max(np.abs(rot.beta - ref.beta)) < 1e-10
        assert np.max(np.abs(rot.omega_x - ref.omega_x)) < 1e-10


# ---------------------------------------------------------------------------
# higher-order induced coefficients
# ---------------------------------------------------------------------------

def _polynomial_value(maps, x):
    total = 0.0
    for coef_map in maps:
        for key, c in coef_map.items():
            v = c
            for j in key:
                v *= x[j]
            total += v
    return total


def test_higher_order_q2_reduces_to_quadratic_form():
    gen = np.random.default_rng(7)
    lam, psi, _, _ = _random_instance(gen, 5, 3)
    mom = factor_posterior_moments(lam, psi)
    w1 = gen.standard_normal(3)
    w2 = gen.standard_normal(3)
    ind = induced_coefficients(mom, w1, np.diag(w2))
    m0 = induced_higher_order(mom, [w1, w2], 0)
    m1 = induced_higher_order(mom, [w1, w2], 1)
    m2 = induced_higher_order(mom, [w1, w2], 2)
    assert abs(m0[()] - ind.intercept) < 1e-12
    for j in range(5):
        assert abs(m1[(j,)] - ind.beta[j]) < 1e-12
        assert abs(m2[(j, j)] - ind.omega_x[j, j]) < 1e-12
        for l in range(j + 1, 5):
            assert abs(m2[(j, l)] - 2.0 * ind.omega_x[j, l]) < 1e-12


def test_higher_order_q3_main_effect_formula():
    # coefficient of x_j at Q=3: sum_h a_hj (omega1_h + 3 omega3_h V_hh)
    gen = np.random.default_rng(8)
    lam, psi, _, _ = _random_instance(gen, 4, 2)
    mom = factor_posterior_moments(lam, psi)
    w = [gen.standard_normal(2) for _ in range(3)]
    m1 = induced_higher_order(mom, w, 1)
    vdiag = np.diag(mom.V)
    for j in range(4):
        ref = float(np.sum(mom.A[:, j] * (w[0] + 3.0 * w[2] * vdiag)))
        assert abs(m1[(j,)] - ref) < 1e-12


@pytest.mark.parametrize("Q", [3, 4])
def test_higher_order_polynomial_matches_quadrature(Q):
    gen = np.random.default_rng(9)
    lam, psi, _, _ = _random_instance(gen, 4, 3)
    mom = factor_posterior_moments(lam, psi)
    w = [gen.standard_normal(3) for _ in range(Q)]
    maps = [induced_higher_order(mom, w, m) for m in range(Q + 1)]
    for _ in range(5):
        x = gen.standard_normal(4)
        ref = gauss_hermite_poly_mean(mom.A @ x, np.diag(mom.V), w)
        assert abs(_polynomial_value(maps, x) - ref) < 1e-8


def test_higher_order_zero_coefficients_and_bounds():
    mom = factor_posterior_moments(np.eye(3), np.ones(3))
    zero = [np.zeros(3)] * 3
    m3 = induced_higher_order(mom, zero, 3)
    assert all(v == 0.0 for v in m3.values())
    with pytest.raises(ValueError):
        induced_higher_order(mom, zero, 4)
    with pytest.raises(ValueError):
        induced_higher_order(mom, [np.zeros(3)] * 5, 2)


# ---------------------------------------------------------------------------
# choosing k
# ---------------------------------------------------------------------------

def test_select_k_examples():
    assert select_k([10.0, 0.0, 0.0, 0.0]) == 1
    # cumulative ratios 0.5, 0.8, 0.9, 1.0: the tie at 0.9 does not count
    assert select_k([5.0, 3.0, 1.0, 1.0]) == 4
    assert select_k(np.ones(10)) == 10


def test_select_k_rejects_bad_input():
    with pytest.raises(ValueError):
        select_k([])
    with pytest.raises(ValueError):
        select_k([1.0, -0.5])
    with pytest.raises(ValueError):
        select_k([0.0, 0.0])


# ---------------------------------------------------------------------------
# rank-truncation KL bound
# ---------------------------------------------------------------------------

def test_kl_bound_exact_rank_recovery():
    gen = np.random.default_rng(10)
    lam = gen.standard_normal((6, 3)) @ np.eye(3)
    lam0 = np.hstack([lam, np.zeros((6, 2))])   # rank 3 padded to k0 = 5
    res = kl_bound_check(lam0, 1.0, 3)
    assert res.kl < 1e-9
    assert res.bound < 1e-9
    assert res.holds


def test_kl_bound_random_instance_holds():
    gen = np.random.default_rng(11)
    lam0 = gen.standard_normal((8, 5))
    res = kl_bound_check(lam0, 1.0, 3)
    assert res.kl > 0.0 and res.bound > 0.0
    assert res.kl <= res.bound


def test_kl_bound_scales_inversely_with_noise():
    gen = np.random.default_rng(12)
    lam0 = gen.standard_normal((8, 5))
    b1 = kl_bound_check(lam0, 1.0, 3).bound
    b10 = kl_bound_check(lam0, 10.0, 3).bound
    np.testing.assert_allclose(b10, b1 / 10.0, rtol=1e-12)


def test_kl_bound_rejects_bad_rank():
    with pytest.raises(ValueError):
        kl_bound_check(np.eye(4), 1.0, 5)
    with pytest.raises(ValueError):
        kl_bound_check(np.eye(4), -1.0, 2)


# ---------------------------------------------------------------------------
# induced prior
# ---------------------------------------------------------------------------

def test_induced_prior_k0_collapses_to_zero():
    s = simulate_induced_prior(6, 0, 50, np.random.default_rng(13))
    assert np.all(s.mains == 0.0)
    assert np.all(s.pairs == 0.0)
    assert np.all(s.triples == 0.0)


def test_induced_prior_widens_with_k_and_shrinks_with_order():
    gen = np.random.default_rng(14)
    s5 = simulate_induced_prior(20, 5, 2000, gen)
    s10 = simulate_induced_prior(20, 10, 2000, gen)
    iqr5, iqr10 = s5.pooled_iqr(), s10.pooled_iqr()
    assert iqr10["main"] > iqr5["main"]
    # higher interaction order, tighter prior around zero
    assert iqr5["pair"] < iqr5["main"]
    assert iqr5["triple"] < iqr5["pair"]
