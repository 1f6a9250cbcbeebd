"""Scenario generators, ground-truth structure, and the metric suite."""

import numpy as np
import pytest

from quadfactor.simulation import (
    GroundTruth,
    ScenarioSpec,
    generate_scenario,
    metrics,
    posterior_to_point,
)


def _spec(**kw):
    base = dict(p=10, n_train=200, n_test=50, scenario="factor",
                density=0.05, seed=0, k_true=4)
    base.update(kw)
    return ScenarioSpec(**base)


# ---------------------------------------------------------------------------
# scenario generation
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(density=0.10)
    with pytest.raises(ValueError):
        _spec(scenario="banded")
    with pytest.raises(ValueError):
        _spec(p=1)
    with pytest.raises(ValueError):
        _spec(p=12, k_true=None)        # no default factor count at p=12
    with pytest.raises(ValueError):
        _spec(scenario="linear", ar1_substitute=False)
    # the published sizes carry their own factor counts
    assert ScenarioSpec(p=25, n_train=10, n_test=0, scenario="factor",
                        density=0.05, seed=0).k_true == 7
    assert ScenarioSpec(p=50, n_train=10, n_test=0, scenario="factor",
                        density=0.05, seed=0).k_true == 17


def test_independent_scenario_is_uncorrelated():
    X, _, _, _, _ = generate_scenario(_spec(p=6, n_train=10 ** 4,
                                            scenario="independent"))
    C = np.corrcoef(X.T)
    off = C[~np.eye(6, dtype=bool)]
    assert np.max(np.abs(off)) < 0.05


def test_linear_scenario_correlation_level():
    X, _, _, _, _ = generate_scenario(_spec(p=25, n_train=4000,
                                            scenario="linear"))
    C = np.corrcoef(X.T)
    off = np.abs(C[~np.eye(25, dtype=bool)])
    assert 0.2 <= off.mean() <= 0.35


def test_factor_scenario_covariance_rank():
    _, _, _, _, truth = generate_scenario(_spec())
    w = np.linalg.eigvalsh(truth.cov_X - np.eye(10))
    assert np.sum(w > 1e-8) == 4
    assert np.all(np.abs(w[w <= 1e-8]) < 1e-8)


@pytest.mark.parametrize("scenario,density", [("factor", 0.05), ("linear", 0.20),
                                              ("independent", 0.20)])
def test_truth_structure(scenario, density):
    spec = _spec(p=12, scenario=scenario, density=density, k_true=4, seed=3)
    _, _, _, _, truth = generate_scenario(spec)
    nz_main = truth.beta0 != 0
    assert nz_main.sum() == 6                      # half the mains, rounded up
    mags = np.abs(truth.beta0[nz_main])
    assert np.all((mags > 0.5) & (mags < 1.0))
    np.testing.assert_array_equal(truth.Omega0, truth.Omega0.T)
    iu = np.triu_indices(12)
    n_pairs = int(np.sum(truth.Omega0[iu] != 0))
    assert n_pairs == round(density * 12 * 13 / 2)
    # strong heredity: both parents of every active pair are active mains
    j, l = np.nonzero(truth.Omega0)
    assert np.all(nz_main[j]) and np.all(nz_main[l])


def test_generator_determinism_and_seed_sensitivity():
    a = generate_scenario(_spec(seed=9))
    b = generate_scenario(_spec(seed=9))
    c = generate_scenario(_spec(seed=10))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[4].Omega0, b[4].Omega0)
    assert np.any(a[0] != c[0])
    # train and test are distinct draws
    assert a[0].shape == (200, 10) and a[2].shape == (50, 10)
    assert not np.array_equal(a[0][:50], a[2])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _brute_metrics(beta_hat, Omega_hat, preds, truth, y_test):
    """Loop-based duplicate of the scoring rules."""
    p = truth.beta0.size
    O = 0.5 * (Omega_hat + Omega_hat.T)
    mse = sum((a - b) ** 2 for a, b in zip(preds, y_test)) / len(y_test)
    main_mse = sum((beta_hat[j] - truth.beta0[j]) ** 2 for j in range(p)) / p
    fr = np.sqrt(sum((O[j, l] - truth.Omega0[j, l]) ** 2
                     for j in range(p) for l in range(p)))
    tp = tn = n_act = n_null = 0
    for j in range(p):
        if truth.beta0[j] != 0:
            n_act += 1
            tp += beta_hat[j] != 0 and np.sign(beta_hat[j]) == np.sign(truth.beta0[j])
        else:
            n_null += 1
            tn += beta_hat[j] == 0
    tpi = tni = n_acti = n_nulli = 0
    for j in range(p):
        for l in range(j, p):
            if truth.Omega0[j, l] != 0:
                n_acti += 1
                tpi += O[j, l] != 0 and np.sign(O[j, l]) == np.sign(truth.Omega0[j, l])
            else:
                n_nulli += 1
                tni += O[j, l] == 0
    return (mse, main_mse, fr, tp / n_act, tn / n_null, tpi / n_acti, tni / n_nulli)


def test_metrics_oracle_estimator():
    spec = _spec(p=8, n_test=400, k_true=3, seed=5)
    _, _, X_test, y_test, truth = generate_scenario(spec)
    rep = metrics((truth.beta0, truth.Omega0, truth.conditional_mean(X_test)),
                  truth, y_test)
    assert rep.tp_main == 1.0 and rep.tn_main == 1.0
    assert rep.tp_interaction == 1.0 and rep.tn_interaction == 1.0
    assert rep.frobenius == 0.0 and rep.main_mse == 0.0
    # residual error is pure noise
    assert 0.7 < rep.test_mse < 1.4


def test_metrics_all_zero_estimator():
    spec = _spec(p=8, n_test=100, k_true=3, seed=6)
    _, _, X_test, y_test, truth = generate_scenario(spec)
    rep = metrics((np.zeros(8), np.zeros((8, 8)), np.zeros(100)), truth, y_test)
    assert rep.tp_main == 0.0 and rep.tn_main == 1.0
    assert rep.tp_interaction == 0.0 and rep.tn_interaction == 1.0
    np.testing.assert_allclose(rep.main_mse, np.sum(truth.beta0 ** 2) / 8)
    np.testing.assert_allclose(rep.test_mse, np.mean(y_test ** 2))


def test_metrics_match_brute_force():
    gen = np.random.default_rng(7)
    beta0 = np.array([0.8, 0.0, -0.6])
    Omega0 = np.array([[0.7, 0.0, -0.55], [0.0, 0.0, 0.0], [-0.55, 0.0, 0.0]])
    truth = GroundTruth(beta0=beta0, Omega0=Omega0, main_support=beta0 != 0,
                        pair_support=Omega0 != 0, cov_X=np.eye(3), noise_sd=1.0)
    y_test = gen.standard_normal(20)
    for _ in range(10):
        beta_hat = np.where(gen.random(3) < 0.4, 0.0, gen.standard_normal(3))
        Omega_hat = gen.standard_normal((3, 3))
        Omega_hat[gen.random((3, 3)) < 0.4] = 0.0    # deliberately asymmetric
        preds = gen.standard_normal(20)
        rep = metrics((beta_hat, Omega_hat, preds), truth, y_test)
        ref = _brute_metrics(beta_hat, Omega_hat, preds, truth, y_test)
        got = (rep.test_mse, rep.main_mse, rep.frobenius, rep.tp_main,
               rep.tn_main, rep.tp_interaction, rep.tn_interaction)
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_metrics_invariant_to_transposed_interactions():
    gen = np.random.default_rng(8)
    _, _, X_test, y_test, truth = generate_scenario(_spec(p=6, k_true=2, seed=9))
    Omega_hat = gen.standard_normal((6, 6))
    est_a = (truth.beta0, Omega_hat, np.zeros(50))
    est_b = (truth.beta0, Omega_hat.T, np.zeros(50))
    a, b = metrics(est_a, truth, y_test), metrics(est_b, truth, y_test)
    assert a.as_dict() == b.as_dict()


def test_metrics_rejects_mismatched_shapes():
    _, _, X_test, y_test, truth = generate_scenario(_spec(p=6, k_true=2))
    with pytest.raises(ValueError):
        metrics((np.zeros(5), np.zeros((6, 6)), np.zeros(50)), truth, y_test)
    with pytest.raises(ValueError):
        metrics((np.zeros(6), np.zeros((6, 6)), np.zeros(49)), truth, y_test)


# ---------------------------------------------------------------------------
# posterior sparsification
# ---------------------------------------------------------------------------

def test_posterior_to_point_zeroing_rules():
    gen = np.random.default_rng(10)
    m = 400
    beta = np.empty((m, 3))
    beta[:, 0] = 1.0 + 0.1 * gen.standard_normal(m)        # clearly positive
    beta[:, 1] = gen.standard_normal(m)                     # straddles zero
    beta[:, 2] = -2.0 + 0.05 * gen.standard_normal(m)
    omega = gen.standard_normal((m, 3, 3))
    beta_hat, omega_hat = posterior_to_point((beta, omega), level=0.95)
    assert beta_hat[0] > 0.0 and beta_hat[2] < 0.0
    assert beta_hat[1] == 0.0
    np.testing.assert_allclose(beta_hat[0], beta[:, 0].mean())
    assert np.all(omega_hat == 0.0)


def test_posterior_to_point_level_monotonicity():
    gen = np.random.default_rng(11)
    m = 500
    beta = gen.standard_normal((m, 12)) + np.linspace(0.0, 0.6, 12)
    omega = np.zeros((m, 2, 2))
    narrow, _ = posterior_to_point((beta, omega), level=0.5)
    wide, _ = posterior_to_point((beta, omega), level=0.95)
    # a wider interval can only zero more coefficients
    assert np.all((wide == 0.0) | (narrow != 0.0) | (wide != 0.0))
    assert set(np.nonzero(wide)[0]) <= set(np.nonzero(narrow)[0])


def test_posterior_to_point_validation():
    with pytest.raises(ValueError):
        posterior_to_point((np.zeros((0, 2)), np.zeros((0, 2, 2))))
    with pytest.raises(ValueError):
        posterior_to_point((np.zeros((5, 2)), np.zeros((5, 2, 2))), level=1.2)
