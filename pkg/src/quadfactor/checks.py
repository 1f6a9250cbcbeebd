"""Fast self-verification suite for the command line `check` verb.

Each check recomputes a small independent oracle (closed forms, Monte
Carlo, or analytic identities) and compares the library against it; one
PASS/FAIL line per check.  The pytest suite runs the same families of
checks at much larger sizes; this module is sized to finish in seconds.
"""

import numpy as np
from scipy.special import kv

from .diagnostics import ess_info
from .distributions import as_generator, sample_gig, sample_truncated_normal
from .model import (
    factor_posterior_moments,
    induced_coefficients,
    kl_bound_check,
    random_orthogonal,
)
from .sampler import Dataset, Hyperparams, run_chain
from .simulation import posterior_to_point


def _random_model(gen, p, k):
    lam = gen.normal(0, 1, (p, k))
    psi = gen.uniform(0.5, 2.0, p)
    omega = gen.normal(0, 1, k)
    Omega = gen.normal(0, 1, (k, k))
    Omega = 0.5 * (Omega + Omega.T)
    return lam, psi, omega, Omega


def check_rotation_invariance(seed=0, n_rot=20):
    gen = as_generator(seed)
    lam, psi, omega, Omega = _random_model(gen, 8, 3)
    base = induced_coefficients(factor_posterior_moments(lam, psi), omega, Omega)
    worst = 0.0
    for _ in range(n_rot):
        P = random_orthogonal(3, gen)
        rot = induced_coefficients(
            factor_posterior_moments(lam @ P, psi), P.T @ omega, P.T @ Omega @ P)
        worst = max(worst,
                    abs(rot.intercept - base.intercept),
                    np.max(np.abs(rot.beta - base.beta)),
                    np.max(np.abs(rot.omega_x - base.omega_x)))
    return worst < 1e-9, f"max deviation {worst:.2e}"


def check_conditional_mean_mc(seed=1, n_mc=200_000):
    gen = as_generator(seed)
    p, k = 4, 2
    lam, psi, omega, Omega = _random_model(gen, p, k)
    ind = induced_coefficients(factor_posterior_moments(lam, psi), omega, Omega)
    x = gen.normal(0, 1, p)
    mom = factor_posterior_moments(lam, psi)
    mu = mom.A @ x
    chol = np.linalg.cholesky(mom.V)
    eta = mu + gen.standard_normal((n_mc, k)) @ chol.T
    ys = eta @ omega + np.einsum("ij,jl,il->i", eta, Omega, eta)
    se = ys.std(ddof=1) / np.sqrt(n_mc)
    diff = abs(ys.mean() - ind.conditional_mean(x[None, :])[0])
    return diff < 4 * se + 1e-10, f"|mc - closed form| = {diff:.2e} (4 se = {4 * se:.2e})"


def check_kl_bound(seed=2, n_cases=10):
    gen = as_generator(seed)
    ok = True
    for _ in range(n_cases):
        p = int(gen.integers(4, 10))
        k0 = int(gen.integers(2, p))
        lam0 = gen.normal(0, 1, (p, k0))
        s0 = float(gen.uniform(0.3, 2.0))
        k = int(gen.integers(1, k0))
        res = kl_bound_check(lam0, s0, k)
        ok = ok and res.kl <= res.bound + 1e-9
    return ok, f"{n_cases} random low-rank truncations"


def check_gig_moments(seed=3, n=20_000):
    gen = as_generator(seed)
    ok, detail = True, []
    for p, a, b in ((0.5, 1.0, 2.0), (2.5, 3.0, 0.5), (-1.5, 2.0, 1.5)):
        x = sample_gig(p, a, b, gen, size=n)
        om = np.sqrt(a * b)
        expect = np.sqrt(b / a) * kv(p + 1, om) / kv(p, om)
        se = x.std(ddof=1) / np.sqrt(n)
        ok = ok and abs(x.mean() - expect) < 5 * se
        detail.append(f"{abs(x.mean() - expect) / se:.1f}se")
    return ok, "mean vs Bessel ratio: " + ", ".join(detail)


def check_truncated_normal(seed=4, n=20_000):
    from scipy.stats import truncnorm
    gen = as_generator(seed)
    mu, sd, hi = 1.0, 2.0, -1.0
    x = sample_truncated_normal(mu, sd ** 2, -np.inf, hi, gen, size=n)
    ref = truncnorm(-np.inf, (hi - mu) / sd, loc=mu, scale=sd)
    se = x.std(ddof=1) / np.sqrt(n)
    diff = abs(x.mean() - ref.mean())
    return (diff < 5 * se) and x.max() <= hi, f"upper-tail mean off by {diff / se:.1f}se"


def check_ess(seed=5):
    gen = as_generator(seed)
    iid, _ = ess_info(gen.standard_normal(1000))
    rho, n = 0.9, 10_000
    x = np.empty(n)
    x[0] = gen.standard_normal()
    eps = gen.standard_normal(n) * np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + eps[t]
    ar, _ = ess_info(x)
    target = n * (1 - rho) / (1 + rho)
    ok = 850 <= iid <= 1150 and abs(ar - target) <= 0.2 * target
    _, flag = ess_info(np.full(50, 3.14))
    return ok and flag, f"iid {iid:.0f}, ar1 {ar:.0f} (target {target:.0f})"


def check_chain_determinism(seed=6):
    gen = as_generator(seed)
    n, p, k = 40, 4, 2
    lam0 = gen.normal(0, 1, (p, k))
    eta0 = gen.normal(0, 1, (n, k))
    X = eta0 @ lam0.T + gen.normal(0, 0.5, (n, p))
    y = eta0[:, 0] - eta0[:, 1] + 0.5 * eta0[:, 0] * eta0[:, 1] + 0.3 * gen.standard_normal(n)
    data = Dataset(y=y, X_obs=X)
    hyper = Hyperparams(k=k, n_iter=120, n_burn=60)
    a = run_chain(data, hyper, seed=9)
    b = run_chain(data, hyper, seed=9)
    same = (np.array_equal(a.beta, b.beta)
            and np.array_equal(a.omega_x, b.omega_x)
            and a.n_kept == hyper.n_iter - hyper.n_burn)
    bh, oh = posterior_to_point((a.beta, a.omega_x))
    shapes = bh.shape == (p,) and oh.shape == (p, p)
    return same and shapes, f"two runs identical over {a.n_kept} kept draws"


ALL_CHECKS = [
    ("rotation invariance of induced coefficients", check_rotation_invariance),
    ("conditional mean vs Monte Carlo", check_conditional_mean_mc),
    ("low-rank KL bound", check_kl_bound),
    ("generalized inverse Gaussian moments", check_gig_moments),
    ("truncated normal moments", check_truncated_normal),
    ("effective sample size estimator", check_ess),
    ("chain determinism and point estimates", check_chain_determinism),
]


def run_checks(stream=None):
    """Run every check, print one line each; returns True when all pass."""
    import sys
    stream = stream or sys.stdout
    all_ok = True
    for name, fn in ALL_CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok = all_ok and ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}  [{detail}]", file=stream)
    return all_ok
