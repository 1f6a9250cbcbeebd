"""Deterministic factor-model math: posterior factor moments and the induced
regression coefficients on the observed-predictor scale.

The generative model is

    y_i = eta_i' omega + eta_i' Omega eta_i + eps_y,   eps_y ~ N(0, sigma^2)
    X_i = Lam eta_i + eps_i,                           eps_i ~ N_p(0, Psi)
    eta_i ~ N_k(0, I),                                 Psi diagonal

which induces an exactly quadratic regression of y on X:

    E[y | X] = tr(Omega V) + (omega' A) X + X' (A' Omega A) X

with V = (Lam' Psi^{-1} Lam + I)^{-1} and A = V Lam' Psi^{-1}.  Monomial
convention throughout: the regression coefficient of x_j x_l for j != l is
2 * OmegaX[j, l]; the coefficient of x_j^2 is OmegaX[j, j].

Everything here is invariant to rotation of the factor basis:
(Lam P, P' omega, P' Omega P) gives identical induced coefficients for any
orthogonal P.
"""

from dataclasses import dataclass
from itertools import combinations, combinations_with_replacement
from math import comb, factorial

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .distributions import (
    PositiveDefiniteError,
    as_generator,
    sample_dirichlet,
    sample_gamma,
)


def _validate_loadings(lam):
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if not np.all(np.isfinite(lam)):
        raise ValueError("loadings must be finite")
    return lam


def _validate_noise(psi_diag, p):
    psi = np.asarray(psi_diag, dtype=float).ravel()
    if psi.size != p:
        raise ValueError(f"noise variance length {psi.size} != number of predictors {p}")
    if not np.all(np.isfinite(psi)) or np.any(psi <= 0):
        raise ValueError(f"noise variances must be positive and finite, got min {psi.min()}")
    return psi


@dataclass
class FactorPosteriorMoments:
    """Conditional moments of the factors given predictors: eta | X ~ N(A X, V)."""

    V: np.ndarray          # k x k, symmetric positive definite, eigenvalues in (0, 1]
    A: np.ndarray          # k x p
    lam: np.ndarray        # p x k loadings used to build the moments
    psi_diag: np.ndarray   # p noise variances

    @property
    def k(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.A.shape[1]

    def validate(self, tol=1e-10):
        if self.k == 0:
            return
        if not np.allclose(self.V, self.V.T, atol=tol):
            raise ValueError("V must be symmetric")
        w = np.linalg.eigvalsh(self.V)
        if w.min() <= 0 or w.max() > 1 + 1e-8:
            raise ValueError(f"V eigenvalues must lie in (0, 1], got [{w.min()}, {w.max()}]")
        recon = self.V @ (self.lam.T / self.psi_diag)
        if np.max(np.abs(recon - self.A)) > tol * max(1.0, np.max(np.abs(self.A))):
            raise ValueError("A does not equal V Lam' Psi^{-1}")


def factor_posterior_moments(lam, psi_diag):
    """Compute V = (Lam' Psi^{-1} Lam + I)^{-1} and A = V Lam' Psi^{-1}.

    Uses one Cholesky of the k x k posterior precision; nothing is inverted
    explicitly except through triangular solves.
    """
    lam = _validate_loadings(lam)
    p, k = lam.shape
    psi = _validate_noise(psi_diag, p)
    if k == 0:
        return FactorPosteriorMoments(np.zeros((0, 0)), np.zeros((0, p)), lam, psi)
    lt_psinv = lam.T / psi            # k x p, rows scaled by 1/psi_j
    prec = lt_psinv @ lam + np.eye(k)
    try:
        cf = cho_factor(prec, lower=True)
    except np.linalg.LinAlgError as e:
        raise PositiveDefiniteError("factor_posterior_moments", str(e)) from None
    V = cho_solve(cf, np.eye(k))
    V = 0.5 * (V + V.T)
    A = cho_solve(cf, lt_psinv)
    return FactorPosteriorMoments(V, A, lam, psi)


@dataclass
class InducedCoefficients:
    """Regression of y on X implied by the factor model.

    E[y|X] = intercept + beta' X + X' omega_x X, plus X' covint Z when
    covariate interactions are present.  See the module docstring for the
    monomial convention on omega_x.
    """

    intercept: float
    beta: np.ndarray       # p
    omega_x: np.ndarray    # p x p symmetric
    covint: np.ndarray | None = None   # p x q, coefficient of x_j z_m

    def conditional_mean(self, X, Z=None, alpha=None):
        """Evaluate E[y | X] (and covariate terms if alpha/Z supplied) rowwise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.intercept + X @ self.beta + np.einsum("ij,jl,il->i", X, self.omega_x, X)
        if Z is not None:
            Z = np.atleast_2d(np.asarray(Z, dtype=float))
            if alpha is not None:
                out = out + Z @ np.asarray(alpha, dtype=float)
            if self.covint is not None:
                out = out + np.einsum("ij,jm,im->i", X, self.covint, Z)
        return out


def induced_coefficients(moments, omega, Omega, Delta=None, sym_tol=1e-8):
    """Map factor-scale coefficients (omega, Omega[, Delta]) through the
    factor posterior moments to predictor-scale coefficients.

    beta = A' omega, omega_x = A' Omega A, intercept = tr(Omega V), and the
    covariate-interaction block is A' Delta.
    """
    k, p = moments.A.shape
    omega = np.asarray(omega, dtype=float).ravel()
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    if omega.size != k:
        raise ValueError(f"omega length {omega.size} != k={k}")
    if Omega.shape != (k, k):
        raise ValueError(f"Omega shape {Omega.shape} != ({k}, {k})")
    if k and np.max(np.abs(Omega - Omega.T)) > sym_tol * max(1.0, np.max(np.abs(Omega))):
        raise ValueError("Omega must be symmetric")
    if k == 0:
        covint = None
        if Delta is not None:
            covint = np.zeros((p, np.atleast_2d(Delta).shape[1]))
        return InducedCoefficients(0.0, np.zeros(p), np.zeros((p, p)), covint)
    A = moments.A
    beta = A.T @ omega
    omega_x = A.T @ Omega @ A
    omega_x = 0.5 * (omega_x + omega_x.T)
    intercept = float(np.trace(Omega @ moments.V))
    covint = None
    if Delta is not None:
        Delta = np.atleast_2d(np.asarray(Delta, dtype=float))
        if Delta.shape[0] != k:
            raise ValueError(f"Delta has {Delta.shape[0]} rows, expected k={k}")
        covint = A.T @ Delta
    return InducedCoefficients(intercept, beta, omega_x, covint)


def response_predictor_covariance(lam, omega):
    """Marginal Cov(y, X) = Lam omega under the quadratic factor model."""
    lam = _validate_loadings(lam)
    return lam @ np.asarray(omega, dtype=float).ravel()


def random_orthogonal(k, rng):
    """Haar-distributed k x k orthogonal matrix (QR with sign correction)."""
    from .distributions import as_generator
    gen = as_generator(rng)
    q, r = np.linalg.qr(gen.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# higher-order induced coefficients
# ---------------------------------------------------------------------------

_MAX_ORDER = 4


def _double_factorial(n):
    # (-1)!! = 1 by convention
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def induced_higher_order(moments, omega_higher, target_order):
    """Induced coefficients of all X-monomials of a given total degree for the
    diagonal polynomial response model E[y|eta] = sum_q omega^{(q)} . eta^q.

    Given eta_h | X ~ N(mu_h, V_hh) with mu_h = sum_j A[h, j] x_j, noncentral
    normal moments turn each factor-scale power into an exact polynomial in X.
    The coefficient of prod_j x_j^{c_j} with sum c_j = m is

        multinomial(m; c) * sum_h w_h(m) * prod_j A[h, j]^{c_j},
        w_h(m) = sum_{q >= m, q = m mod 2} omega_h^{(q)} C(q, m) (q-m-1)!! V_hh^{(q-m)/2}.

    Parameters
    ----------
    omega_higher : sequence of (k,) arrays, coefficients for powers q = 1..Q
    target_order : int, total degree m of the returned monomials (0 = intercept)

    Returns
    -------
    dict mapping a nondecreasing tuple of predictor indices (length m) to the
    monomial's regression coefficient.  The empty tuple keys the intercept.
    """
    k, p = moments.A.shape
    omega_higher = [np.asarray(w, dtype=float).ravel() for w in omega_higher]
    Q = len(omega_higher)
    if Q > _MAX_ORDER:
        raise ValueError(f"polynomial order {Q} not supported, maximum is {_MAX_ORDER}")
    if not (0 <= target_order <= Q):
        raise ValueError(f"target_order must lie in [0, {Q}], got {target_order}")
    for q, w in enumerate(omega_higher, start=1):
        if w.size != k:
            raise ValueError(f"omega^({q}) has length {w.size}, expected k={k}")
    m = target_order
    if k == 0:
        return {(): 0.0} if m == 0 else {key: 0.0 for key in combinations_with_replacement(range(p), m)}
    v_diag = np.diag(moments.V)
    # w_h(m) is shared by every monomial of degree m; only powers with the
    # same parity as m contribute
    w = np.zeros(k)
    for q in range(m if m > 0 else 2, Q + 1, 2):
        coef = comb(q, m) * _double_factorial(q - m - 1)
        w += omega_higher[q - 1] * coef * v_diag ** ((q - m) // 2)
    if m == 0:
        return {(): float(w.sum())}
    A = moments.A
    out = {}
    for key in combinations_with_replacement(range(p), m):
        counts = {}
        for j in key:
            counts[j] = counts.get(j, 0) + 1
        mult = factorial(m)
        prod = np.ones(k)
        for j, c in counts.items():
            mult //= factorial(c)
            prod *= A[:, j] ** c
        out[key] = float(mult * np.dot(w, prod))
    return out


# ---------------------------------------------------------------------------
# choosing the number of factors
# ---------------------------------------------------------------------------

def select_k(singular_values, threshold=0.9):
    """Smallest k whose leading singular values explain strictly more than
    `threshold` of the total.  Ties at the threshold do not count."""
    v = np.asarray(singular_values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("singular_values is empty")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("singular values must be nonnegative and finite")
    total = v.sum()
    if total <= 0:
        raise ValueError("singular values sum to zero")
    ratios = np.cumsum(np.sort(v)[::-1]) / total
    above = np.nonzero(ratios > threshold)[0]
    if above.size == 0:
        return int(v.size)
    return int(above[0] + 1)


# ---------------------------------------------------------------------------
# rank-truncation KL bound
# ---------------------------------------------------------------------------

@dataclass
class KlBoundResult:
    kl: float
    bound: float
    holds: bool
    eigenvalues: np.ndarray


def kl_bound_check(lam0, s0, k, tol=1e-9):
    """Check that truncating a rank-k0 factor covariance to its best rank-k
    approximation costs at most sum_{j>k} v_j / s0 in Kullback-Leibler
    divergence, where v_j are the eigenvalues of Lam0 Lam0'.

    Compares KL(N(0, Lam0 Lam0' + s0 I) || N(0, truncation + s0 I)) against
    the bound; both vanish when k >= rank(Lam0).
    """
    lam0 = _validate_loadings(lam0)
    p, k0 = lam0.shape
    if s0 <= 0:
        raise ValueError(f"s0 must be positive, got {s0}")
    if not (0 <= k <= k0):
        raise ValueError(f"k must lie in [0, {k0}], got {k}")
    gram = lam0 @ lam0.T
    w, U = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    U = U[:, order]
    sigma0 = gram + s0 * np.eye(p)
    trunc = (U[:, :k] * w[:k]) @ U[:, :k].T
    sigma1 = trunc + s0 * np.eye(p)
    sign0, logdet0 = np.linalg.slogdet(sigma0)
    sign1, logdet1 = np.linalg.slogdet(sigma1)
    if sign0 <= 0 or sign1 <= 0:
        raise PositiveDefiniteError("kl_bound_check")
    kl = 0.5 * (np.trace(np.linalg.solve(sigma1, sigma0)) - p + logdet1 - logdet0)
    kl = float(max(kl, 0.0))
    bound = float(w[k:k0].sum() / s0)
    return KlBoundResult(kl, bound, kl <= bound + tol, w[:k0])


# ---------------------------------------------------------------------------
# induced-prior simulation
# ---------------------------------------------------------------------------

@dataclass
class InducedPriorSamples:
    """Prior draws of induced coefficients, pooled across positions per order."""

    mains: np.ndarray      # n_draws x p
    pairs: np.ndarray      # n_draws x C(p, 2), monomial coefficients of x_j x_l
    triples: np.ndarray | None   # n_draws x C(p, 3), coefficients of x_j x_l x_m
    pair_index: list
    triple_index: list | None

    def pooled_quantiles(self, qs=(0.05, 0.25, 0.75, 0.95)):
        out = {"main": np.quantile(self.mains.ravel(), qs),
               "pair": np.quantile(self.pairs.ravel(), qs)}
        if self.triples is not None:
            out["triple"] = np.quantile(self.triples.ravel(), qs)
        return out

    def pooled_iqr(self):
        """Width of the central 50% interval per coefficient order."""
        qs = self.pooled_quantiles((0.25, 0.75))
        return {name: float(v[1] - v[0]) for name, v in qs.items()}


def simulate_induced_prior(p, k, n_draws, rng, dl_a=0.5, include_triples=True,
                           inv_gamma_shape=0.5, inv_gamma_rate=0.5):
    """Monte Carlo draws from the prior on induced coefficients.

    Loadings follow the row-wise Dirichlet-Laplace prior (lambda_{jh} double
    exponential with scale phi_{jh} tau_j, phi_j ~ Dir(a..a), tau_j ~
    Gamma(k a, 1/2)); noise variances are inverse gamma; the factor-scale
    coefficients are elementwise standard normal (omega, symmetric Omega, and
    a cubic term omega^(3) for the third-order coefficients).

    Third-order coefficients are the distinct-triple monomials x_j x_l x_m,
    computed from the same noncentral-moment expansion as
    induced_higher_order (coefficient 6 sum_h omega3_h A_hj A_hl A_hm).
    """
    if p < 1 or k < 0:
        raise ValueError(f"need p >= 1 and k >= 0, got p={p}, k={k}")
    gen = as_generator(rng)
    n_pairs = p * (p - 1) // 2
    n_triples = p * (p - 1) * (p - 2) // 6
    mains = np.empty((n_draws, p))
    pairs = np.empty((n_draws, n_pairs))
    triples = np.empty((n_draws, n_triples)) if include_triples else None
    iu = np.triu_indices(p, 1)
    tri_idx = None
    if include_triples:
        tri_idx = list(combinations(range(p), 3))
        ti = np.array(tri_idx).T if tri_idx else np.zeros((3, 0), dtype=int)
    for d in range(n_draws):
        tau = sample_gamma(k * dl_a, 0.5, gen, size=p) if k else np.zeros(p)
        phi = sample_dirichlet(np.full((p, max(k, 1)), dl_a), gen)[:, :k]
        lam = gen.laplace(0.0, phi * tau[:, None]) if k else np.zeros((p, 0))
        psi = 1.0 / gen.gamma(inv_gamma_shape, 1.0 / inv_gamma_rate, size=p)
        omega = gen.standard_normal(k)
        W = gen.standard_normal((k, k))
        Omega = np.triu(W) + np.triu(W, 1).T
        mom = factor_posterior_moments(lam, psi)
        ind = induced_coefficients(mom, omega, Omega)
        mains[d] = ind.beta
        pairs[d] = 2.0 * ind.omega_x[iu]
        if include_triples:
            omega3 = gen.standard_normal(k)
            A = mom.A
            if k:
                cube = np.einsum("h,hj,hl,hm->jlm", omega3, A, A, A)
                triples[d] = 6.0 * cube[ti[0], ti[1], ti[2]]
            else:
                triples[d] = 0.0
    pair_index = list(zip(*[idx.tolist() for idx in iu])) if n_pairs else []
    return InducedPriorSamples(mains, pairs, triples, pair_index, tri_idx)
