"""MCMC engine for the latent-factor quadratic regression.

One sweep is a composite cycle.  An inner loop, repeated
`Hyperparams.inner_rounds` times, updates the factor scores (an
independence refresh from eta | X, then MALA), the factor-scale regression
coefficients (conjugate normals), the response noise, the predictor noise
on its loading-marginalized conditional, and the loading rows.  Once per
cycle the shrinkage local scales, the conjugate predictor-noise draw, a
per-factor scale group move and the imputation of non-observed X cells
(missing from the conditional normal, censored from the truncated normal)
follow.

Shrinkage-prior bookkeeping.  Loadings carry a row-wise Dirichlet-Laplace
prior: lambda_{jh} | phi, tau ~ DoubleExp(phi_{jh} tau_j) with phi_j on the
simplex and tau_j ~ Gamma(k a, 1/2).  The sampler works in the augmented
form lambda_{jh} | psi, phi, tau ~ N(0, psi_{jh} phi_{jh}^2 tau_j^2) with
psi_{jh} ~ Exp(1/2).  Within a sweep the three local blocks are drawn as one
exact joint draw from p(phi, tau, psi | Lambda): first phi from its
tau-and-psi-marginal conditional (normalized GIG draws), then tau | phi,
then psi | phi, tau.  Composing them in the opposite order would condition
psi on stale scales and the joint distribution of the chain would drift —
the joint-distribution test in geweke.py catches exactly that.

The psi draw inverts an inverse-Gaussian variate with mean
tau_j phi_{jh} / |lambda_{jh}|; set `dl_step6_literal` to sample the
unconditioned InverseGaussian(tau_j phi_{jh}, 1) instead (a printed variant
kept for comparison only — it cannot adapt the shrinkage to the loadings and
fails the joint-distribution test).

Every random draw flows through a stream keyed by (seed, 16 * iteration +
step), and units updated within a step take their variates from fixed slots
of that stream's output, so any parallel schedule of the per-row updates
reproduces the sequential result bit for bit.
"""

import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .diagnostics import ess_info
from .distributions import (
    RngStream,
    as_generator,
    sample_gamma,
    sample_gig,
    sample_mvn_precision,
    sample_truncated_normal,
)
from .model import factor_posterior_moments, induced_coefficients

OBSERVED, MISSING, BELOW_LOD = 0, 1, 2

_GIG_FLOOR = 1e-12
_STREAMS_PER_ITER = 16
(_S_ETA, _S_OMEGA, _S_BIGOMEGA, _S_ALPHA_DELTA, _S_SIGMA2, _S_LAMBDA,
 _S_DL, _S_PSI, _S_IMPUTE, _S_PREDICT, _S_DATA) = range(11)
_S_SCALE, _S_REFRESH, _S_PSI_MH = 12, 13, 14
_S_INIT = 15


class ChainDivergenceError(RuntimeError):
    """Raised when a sweep produces non-finite state."""

    def __init__(self, iteration, block):
        self.iteration = iteration
        self.block = block
        super().__init__(f"non-finite values in block '{block}' at iteration {iteration}")


@dataclass
class Hyperparams:
    """Sampler configuration; defaults follow the reference analysis."""

    k: int
    dl_a: float = 0.5
    prior_var_coef: float = 100.0
    inv_gamma_shape: float = 0.5
    inv_gamma_rate: float = 0.5
    mala_step: float = 0.1
    mala_target_accept: float = 0.574
    n_iter: int = 5000
    n_burn: int = 4000
    seed: int = 0
    inner_rounds: int = 2
    psi_prop_sd: float = 0.25
    # The predictor-noise prior defaults to the response-noise one, but the
    # two live on different scales once y is standardized against a
    # high-signal model: a rate soft enough for sigma2 puts the psi prior
    # mode near zero, and with k = p the decomposition LL' + Psi is ridge-
    # shaped in exactly that direction.  Override these to keep psi pinned.
    psi_ig_shape: float = None
    psi_ig_rate: float = None
    # With a constant covariate column the interaction block Delta @ z
    # duplicates omega exactly; the pair is then identified only through the
    # prior and random-walks to large opposite values, dragging a slow mode
    # into everything it touches.  Turn the block off for intercept-style
    # covariates.
    covariate_interactions: bool = True
    dl_step6_literal: bool = False
    debug_validate: bool = False

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")
        if self.psi_ig_shape is None:
            self.psi_ig_shape = self.inv_gamma_shape
        if self.psi_ig_rate is None:
            self.psi_ig_rate = self.inv_gamma_rate
        for name in ("dl_a", "prior_var_coef", "inv_gamma_shape",
                     "inv_gamma_rate", "mala_step", "psi_prop_sd",
                     "psi_ig_shape", "psi_ig_rate"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not 0 < self.mala_target_accept < 1:
            raise ValueError(f"mala_target_accept must be in (0,1), got {self.mala_target_accept}")
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError(f"need 0 <= n_burn < n_iter, got {self.n_burn}, {self.n_iter}")
        if self.inner_rounds < 1:
            raise ValueError(f"inner_rounds must be >= 1, got {self.inner_rounds}")


@dataclass
class Dataset:
    """Observed data with per-cell status: 0 observed, 1 missing, 2 below the
    detection limit.  `lod` holds the censoring bound per column on the
    modeling scale (NaN where a column has none); values of X_obs at
    non-observed cells are ignored."""

    y: np.ndarray
    X_obs: np.ndarray
    status: np.ndarray = None
    lod: np.ndarray = None
    Z: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X_obs = np.atleast_2d(np.asarray(self.X_obs, dtype=float))
        n, p = self.X_obs.shape
        if self.y.size != n:
            raise ValueError(f"y has length {self.y.size}, X has {n} rows")
        if n < 2:
            raise ValueError(f"need at least 2 rows, got {n}")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("response contains non-finite values")
        if self.status is None:
            self.status = np.zeros((n, p), dtype=np.int8)
        else:
            self.status = np.asarray(self.status, dtype=np.int8)
            if self.status.shape != (n, p):
                raise ValueError(f"status shape {self.status.shape} != X shape {(n, p)}")
        if not np.all(np.isin(self.status, (OBSERVED, MISSING, BELOW_LOD))):
            raise ValueError("status entries must be 0 (observed), 1 (missing) or 2 (below LOD)")
        if self.lod is None:
            self.lod = np.full(p, np.nan)
        else:
            self.lod = np.asarray(self.lod, dtype=float).ravel()
            if self.lod.size != p:
                raise ValueError(f"lod has length {self.lod.size}, expected {p}")
        censored_cols = np.unique(np.nonzero(self.status == BELOW_LOD)[1])
        bad = censored_cols[~np.isfinite(self.lod[censored_cols])]
        if bad.size:
            raise ValueError(f"below-LOD cells in columns {bad.tolist()} but no detection limit given")
        obs = self.status == OBSERVED
        if not np.all(np.isfinite(self.X_obs[obs])):
            raise ValueError("observed X cells contain non-finite values")
        if self.Z is not None:
            self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
            if self.Z.shape[0] != n:
                raise ValueError(f"Z has {self.Z.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(self.Z)):
                raise ValueError("covariates contain non-finite values")

    @property
    def n(self):
        return self.X_obs.shape[0]

    @property
    def p(self):
        return self.X_obs.shape[1]

    @property
    def q(self):
        return 0 if self.Z is None else self.Z.shape[1]


@dataclass
class ModelState:
    """All latent quantities of one chain."""

    eta: np.ndarray          # n x k factor scores
    lam: np.ndarray          # p x k loadings
    lam_mask: np.ndarray     # p x k bool, False entries pinned to zero
    omega: np.ndarray        # k
    Omega: np.ndarray        # k x k symmetric
    sigma2: float
    psi_diag: np.ndarray     # p predictor noise variances
    phi: np.ndarray          # p x k simplex rows
    tau: np.ndarray          # p
    psi_local: np.ndarray    # p x k
    X_imputed: np.ndarray    # n x p, observed cells fixed at the data
    alpha: np.ndarray = None     # q
    Delta: np.ndarray = None     # k x q

    def validate(self, data, tol=1e-10):
        k = self.lam.shape[1]
        if k:
            if np.max(np.abs(self.phi.sum(axis=1) - 1.0)) > tol:
                raise AssertionError("phi rows left the simplex")
            if np.any(self.phi <= 0) or np.any(self.psi_local <= 0) or np.any(self.tau <= 0):
                raise AssertionError("shrinkage locals must stay positive")
            if np.max(np.abs(self.Omega - self.Omega.T)) > tol:
                raise AssertionError("Omega lost symmetry")
            if np.any(self.lam[~self.lam_mask] != 0.0):
                raise AssertionError("masked loadings moved off zero")
        if not (self.sigma2 > 0 and np.all(self.psi_diag > 0)):
            raise AssertionError("noise variances must stay positive")
        obs = data.status == OBSERVED
        if np.any(self.X_imputed[obs] != data.X_obs[obs]):
            raise AssertionError("observed cells were overwritten")
        cens = data.status == BELOW_LOD
        if np.any(cens):
            bounds = np.broadcast_to(data.lod, self.X_imputed.shape)
            if np.any(self.X_imputed[cens] > bounds[cens]):
                raise AssertionError("censored imputations exceeded the detection limit")


@dataclass
class ChainOutput:
    """Kept draws of rotation-invariant quantities plus diagnostics."""

    intercept: np.ndarray          # m
    beta: np.ndarray               # m x p
    omega_x: np.ndarray            # m x p x p
    sigma2_draws: np.ndarray       # m
    accept_rate_eta: float
    mala_step_final: float
    ess_beta: np.ndarray           # p
    seed: int
    covint: np.ndarray = None      # m x p x q
    alpha_draws: np.ndarray = None # m x q
    predictive_draws: np.ndarray = None  # n_test x m
    imputed_cells: list = field(default_factory=list)
    imputed_mean: np.ndarray = None
    imputed_sd: np.ndarray = None
    loadings_mean: np.ndarray = None

    @property
    def n_kept(self):
        return self.beta.shape[0]


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def monomial_pairs(k):
    """Index pairs (h, l), h <= l, ordering the quadratic design columns."""
    return list(combinations_with_replacement(range(k), 2))


def assemble_omega(coef, k):
    """Symmetric Omega from monomial coefficients: the fitted form
    eta' Omega eta reproduces sum_{h<=l} c_{hl} eta_h eta_l exactly
    (diagonal placed as-is, off-diagonal halved into both triangles)."""
    Omega = np.zeros((k, k))
    for c, (h, l) in zip(coef, monomial_pairs(k)):
        if h == l:
            Omega[h, h] = c
        else:
            Omega[h, l] = Omega[l, h] = 0.5 * c
    return Omega


def _y_parts(state, data):
    """Per-row response-mean components: (eta'omega, eta'Omega eta, Z alpha,
    eta'Delta Z)."""
    u = state.eta @ state.omega if state.lam.shape[1] else np.zeros(data.n)
    if state.lam.shape[1]:
        Oe = state.eta @ state.Omega
        v = np.einsum("ij,ij->i", state.eta, Oe)
    else:
        v = np.zeros(data.n)
    if data.Z is not None:
        zlin = data.Z @ state.alpha
        zint = np.einsum("ij,ij->i", state.eta, data.Z @ state.Delta.T)
    else:
        zlin = zint = np.zeros(data.n)
    return u, v, zlin, zint


def _mvn_prec_slots(prec, rhs, z, context):
    """N(H^{-1} rhs, H^{-1}) draw using pre-drawn standard normals `z`, so the
    caller controls which stream slots each unit consumes."""
    try:
        cf = cho_factor(prec, lower=True)
    except np.linalg.LinAlgError as e:
        from .distributions import PositiveDefiniteError
        raise PositiveDefiniteError(context, str(e)) from None
    mean = cho_solve(cf, rhs)
    return mean + solve_triangular(cf[0], z, lower=True, trans="T"), mean


# ---------------------------------------------------------------------------
# Step 1: factor scores by MALA
# ---------------------------------------------------------------------------

def _eta_environment(state, data):
    k = state.lam.shape[1]
    B = state.lam.T / state.psi_diag                    # k x p = Lam' Psi^{-1}
    G = B @ state.lam + np.eye(k)                       # Lam' Psi^{-1} Lam + I
    lin = state.X_imputed @ B.T                         # rows Lam' Psi^{-1} x_i
    if data.Z is not None:
        y_eff = data.y - data.Z @ state.alpha
        omega_eff = state.omega[None, :] + data.Z @ state.Delta.T
    else:
        y_eff = data.y
        omega_eff = np.broadcast_to(state.omega, (data.n, k))
    return G, lin, y_eff, omega_eff


def eta_log_density_and_grad(state, data, i=None):
    """Log full conditional of the factor scores (up to a constant) and its
    exact gradient; all rows at once, or a single row when `i` is given."""
    G, lin, y_eff, omega_eff = _eta_environment(state, data)
    logp, grad = _eta_logpi_grad(state.eta, state.Omega, state.sigma2,
                                 G, lin, y_eff, omega_eff)
    if i is None:
        return logp, grad
    return float(logp[i]), grad[i]


def _eta_logpi_grad(eta, Omega, sigma2, G, lin, y_eff, omega_eff):
    u = np.einsum("ij,ij->i", eta, omega_eff)
    Oe = eta @ Omega
    v = np.einsum("ij,ij->i", eta, Oe)
    r = y_eff - u - v
    quad = np.einsum("ij,ij->i", eta, eta @ G)
    logp = -0.5 * r * r / sigma2 - 0.5 * quad + np.einsum("ij,ij->i", eta, lin)
    grad = (r / sigma2)[:, None] * (omega_eff + 2.0 * Oe) - eta @ G + lin
    return logp, grad


def mala_update_eta(state, data, step, rng):
    """One Langevin proposal per row with the exact asymmetric MH correction:
    proposal N(eta + (step/2) grad, step I).  Returns per-row accept flags."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    n, k = state.eta.shape
    if k == 0:
        return np.ones(n, dtype=bool)
    gen = as_generator(rng)
    env = _eta_environment(state, data)
    eta0 = state.eta
    lp0, g0 = _eta_logpi_grad(eta0, state.Omega, state.sigma2, *env)
    noise = gen.standard_normal((n, k))
    log_u = np.log(gen.uniform(size=n))
    mean_fwd = eta0 + 0.5 * step * g0
    prop = mean_fwd + np.sqrt(step) * noise
    lp1, g1 = _eta_logpi_grad(prop, state.Omega, state.sigma2, *env)
    mean_rev = prop + 0.5 * step * g1
    log_q_fwd = -np.einsum("ij,ij->i", prop - mean_fwd, prop - mean_fwd) / (2.0 * step)
    log_q_rev = -np.einsum("ij,ij->i", eta0 - mean_rev, eta0 - mean_rev) / (2.0 * step)
    with np.errstate(invalid="ignore"):
        log_alpha = lp1 - lp0 + log_q_rev - log_q_fwd
    accept = log_u < np.nan_to_num(log_alpha, nan=-np.inf)
    state.eta = np.where(accept[:, None], prop, eta0)
    return accept


def eta_refresh(state, data, rng):
    """Independence refresh of the factor scores.

    Rows are proposed from eta | X alone, N(A x_i, V); under that proposal
    the X-likelihood and the N(0, I) prior cancel exactly against the
    proposal density, so the MH ratio reduces to the response likelihood.
    Complements the local MALA moves with occasional long jumps — scores in
    a y-induced mode far from A x_i are revisited rather than random-walked.
    Returns the accepted fraction.
    """
    n, k = state.eta.shape
    if k == 0:
        return 1.0
    gen = as_generator(rng)
    mom = factor_posterior_moments(state.lam, state.psi_diag)
    mean = state.X_imputed @ mom.A.T
    chol = np.linalg.cholesky(mom.V)
    prop = mean + gen.standard_normal((n, k)) @ chol.T
    log_u = np.log(gen.uniform(size=n))
    accept = log_u < _y_loglik_rows(prop, state, data) - _y_loglik_rows(state.eta, state, data)
    state.eta[accept] = prop[accept]
    return float(np.mean(accept))


def _y_loglik_rows(eta, state, data):
    mean = eta @ state.omega + np.einsum("ij,jk,ik->i", eta, state.Omega, eta)
    if data.Z is not None:
        mean = mean + data.Z @ state.alpha \
            + np.einsum("ih,hm,im->i", eta, state.Delta, data.Z)
    r = data.y - mean
    return -0.5 * r * r / state.sigma2


# ---------------------------------------------------------------------------
# Steps 2-4 and the covariate block
# ---------------------------------------------------------------------------

def gibbs_omega(state, data, hyper, rng):
    k = state.lam.shape[1]
    if k == 0:
        return
    _, v, zlin, zint = _y_parts(state, data)
    r = data.y - v - zlin - zint
    prec = state.eta.T @ state.eta / state.sigma2 + np.eye(k) / hyper.prior_var_coef
    rhs = state.eta.T @ r / state.sigma2
    state.omega, _ = sample_mvn_precision(prec, rhs, rng, context="omega update")


def gibbs_Omega(state, data, hyper, rng):
    k = state.lam.shape[1]
    if k == 0:
        return
    u, _, zlin, zint = _y_parts(state, data)
    r = data.y - u - zlin - zint
    pairs = monomial_pairs(k)
    design = np.empty((data.n, len(pairs)))
    for c, (h, l) in enumerate(pairs):
        design[:, c] = state.eta[:, h] * state.eta[:, l]
    prec = design.T @ design / state.sigma2 + np.eye(len(pairs)) / hyper.prior_var_coef
    rhs = design.T @ r / state.sigma2
    coef, _ = sample_mvn_precision(prec, rhs, rng, context="interaction-matrix update")
    state.Omega = assemble_omega(coef, k)


def gibbs_alpha_delta(state, data, hyper, rng):
    """Joint conjugate draw of the covariate main effects and the
    factor-covariate interaction matrix; skipped when no covariates.  When
    covariate interactions are disabled only the main effects are drawn and
    Delta stays pinned at zero."""
    if data.Z is None:
        return
    n, k = state.eta.shape
    q = data.q
    u, v, _, _ = _y_parts(state, data)
    r = data.y - u - v
    if not hyper.covariate_interactions:
        prec = data.Z.T @ data.Z / state.sigma2 + np.eye(q) / hyper.prior_var_coef
        rhs = data.Z.T @ r / state.sigma2
        state.alpha, _ = sample_mvn_precision(prec, rhs, rng,
                                              context="covariate update")
        state.Delta = np.zeros((k, q))
        return
    design = np.empty((n, q + k * q))
    design[:, :q] = data.Z
    design[:, q:] = np.einsum("ih,im->ihm", state.eta, data.Z).reshape(n, k * q)
    m = q + k * q
    prec = design.T @ design / state.sigma2 + np.eye(m) / hyper.prior_var_coef
    rhs = design.T @ r / state.sigma2
    coef, _ = sample_mvn_precision(prec, rhs, rng, context="covariate update")
    state.alpha = coef[:q]
    state.Delta = coef[q:].reshape(k, q)


def gibbs_sigma2(state, data, hyper, rng):
    u, v, zlin, zint = _y_parts(state, data)
    resid = data.y - u - v - zlin - zint
    shape = hyper.inv_gamma_shape + 0.5 * data.n
    rate = hyper.inv_gamma_rate + 0.5 * float(resid @ resid)
    draw = sample_gamma(shape, rate, rng)
    # overflowing residuals push the rate to inf and the draw to zero; map
    # that to an infinite variance so the finite check reports the block
    state.sigma2 = 1.0 / draw if draw > 0.0 else float("inf")


# ---------------------------------------------------------------------------
# Steps 5-9: loadings, shrinkage locals, predictor noise
# ---------------------------------------------------------------------------

def gibbs_lambda_rows(state, data, hyper, rng, row_order=None):
    """Row-wise conjugate draws with prior precision D_j^{-1},
    D_j = diag(tau_j^2 psi_{jh} phi_{jh}^2).  Masked entries stay exactly
    zero; the draw conditions on the free sub-vector only.  Each row
    consumes a fixed slot of the step stream, so any update schedule
    (row_order, or rows farmed out in parallel) gives bitwise-identical
    results."""
    p, k = state.lam.shape
    if k == 0:
        return
    gen = as_generator(rng)
    z = gen.standard_normal((p, k))
    d = state.tau[:, None] ** 2 * state.psi_local * state.phi ** 2
    d = np.maximum(d, 1e-290)
    lam = np.zeros((p, k))
    for j in (range(p) if row_order is None else row_order):
        free = state.lam_mask[j]
        kf = int(free.sum())
        if kf == 0:
            continue
        eta_f = state.eta[:, free]
        prec = eta_f.T @ eta_f / state.psi_diag[j] + np.diag(1.0 / d[j, free])
        rhs = eta_f.T @ state.X_imputed[:, j] / state.psi_diag[j]
        draw, _ = _mvn_prec_slots(prec, rhs, z[j, free], f"loading row {j}")
        lam[j, free] = draw
    state.lam = lam


def dl_local_updates(state, hyper, rng):
    """Exact joint draw of the shrinkage locals given the loadings.

    Order matters: phi comes from its (tau, psi)-marginal conditional via
    normalized GIG(a-1, 1, 2|lambda|) variates, then tau | phi from
    GIG(k a - k, 1, 2 sum_h |lambda_{jh}|/phi_{jh}), then psi | phi, tau by
    inverting InverseGaussian(tau phi / |lambda|, 1) draws.  GIG b-arguments
    are floored at 1e-12 so exactly-zero loadings stay defined.
    """
    p, k = state.lam.shape
    if k == 0:
        return
    gen = as_generator(rng)
    abs_lam = np.abs(state.lam)
    T = sample_gig(hyper.dl_a - 1.0, 1.0, np.maximum(2.0 * abs_lam, _GIG_FLOOR), gen)
    state.phi = T / T.sum(axis=1, keepdims=True)
    b_tau = np.maximum(2.0 * (abs_lam / state.phi).sum(axis=1), _GIG_FLOOR)
    state.tau = np.atleast_1d(sample_gig(k * hyper.dl_a - k, 1.0, b_tau, gen))
    scale = state.tau[:, None] * state.phi
    if hyper.dl_step6_literal:
        state.psi_local = gen.wald(np.clip(scale, 1e-12, 1e13), 1.0)
    else:
        mu = np.clip(scale / np.maximum(abs_lam, 1e-12), 1e-12, 1e13)
        # wald() underflows to exactly 0 for tiny means
        state.psi_local = 1.0 / np.maximum(gen.wald(mu, 1.0), 1e-12)


def gibbs_psi_diag(state, data, hyper, rng):
    resid = state.X_imputed - state.eta @ state.lam.T
    ss = np.einsum("ij,ij->j", resid, resid)
    shape = hyper.psi_ig_shape + 0.5 * data.n
    rate = hyper.psi_ig_rate + 0.5 * ss
    state.psi_diag = 1.0 / sample_gamma(shape, rate, rng, size=data.p)


def psi_marginal_mh(state, data, hyper, rng):
    """Random-walk MH on log psi_j against the loading-row-marginalized
    X-likelihood.

    Integrating lambda_j out of x_j | eta gives N(0, eta D_j eta' + psi_j I)
    with D_j the diagonal shrinkage-prior variances, evaluated through the
    k x k eigenproblem of D_j^{1/2} eta'eta D_j^{1/2} (all columns batched).
    The conditional draw of psi_j given lambda_j barely moves once n is
    large — the loadings pin the residuals — so this collapsed move is what
    actually traverses the psi scale.  A caller must redraw the loading rows
    immediately afterwards to keep the cycle a valid partially collapsed
    sampler.  Masked loading entries have zero prior variance and drop out
    of the marginal on their own.  Returns the accepted fraction.
    """
    n, k = state.eta.shape
    p = data.p
    gen = as_generator(rng)
    a0, b0 = hyper.psi_ig_shape, hyper.psi_ig_rate
    sxx = np.einsum("ij,ij->j", state.X_imputed, state.X_imputed)
    if k:
        G = state.eta.T @ state.eta
        EtX = state.eta.T @ state.X_imputed
        c = np.maximum(state.psi_local * state.phi ** 2, _GIG_FLOOR)
        sqc = np.where(state.lam_mask, np.sqrt(c) * state.tau[:, None], 0.0)
        M = G[None, :, :] * (sqc[:, :, None] * sqc[:, None, :])
        mev, Q = np.linalg.eigh(M)
        mev = np.maximum(mev, 0.0)
        w2 = np.einsum("jlk,jl->jk", Q, sqc * EtX.T) ** 2
    else:
        mev = w2 = np.zeros((p, 0))

    def logf(t):
        den = np.exp(t)[:, None] + mev
        quad = np.exp(-t) * (sxx - np.sum(w2 / den, axis=1))
        logdet = (n - k) * t + np.sum(np.log(den), axis=1)
        return -0.5 * (logdet + quad) - a0 * t - b0 * np.exp(-t)

    t0 = np.log(state.psi_diag)
    t1 = t0 + hyper.psi_prop_sd * gen.standard_normal(p)
    accept = np.log(gen.uniform(size=p)) < logf(t1) - logf(t0)
    state.psi_diag = np.where(accept, np.exp(t1), state.psi_diag)
    return float(np.mean(accept))


def impute_missing_and_lod(state, data, rng):
    """Redraw non-observed cells from their conditionals: N(lambda_j'eta_i,
    psi_j) for missing, the same normal truncated above at the detection
    limit for censored cells.  Observed cells are never touched."""
    gen = as_generator(rng)
    miss_i, miss_j = np.nonzero(data.status == MISSING)
    cens_i, cens_j = np.nonzero(data.status == BELOW_LOD)
    if miss_i.size == 0 and cens_i.size == 0:
        return
    pred = state.eta @ state.lam.T
    if miss_i.size:
        z = gen.standard_normal(miss_i.size)
        state.X_imputed[miss_i, miss_j] = (
            pred[miss_i, miss_j] + np.sqrt(state.psi_diag[miss_j]) * z)
    if cens_i.size:
        draws = sample_truncated_normal(
            pred[cens_i, cens_j], state.psi_diag[cens_j],
            -np.inf, data.lod[cens_j], gen)
        state.X_imputed[cens_i, cens_j] = draws


def _slice_1d(logf, t0, rng, width=0.25, max_steps=30):
    """Stepping-out slice sampler for a unimodal-ish 1-d log density.
    Falls back to t0 if shrinkage exhausts its budget."""
    y = logf(t0) + np.log(rng.uniform(low=np.nextafter(0, 1), high=1.0))
    lo = t0 - width * rng.uniform()
    hi = lo + width
    for _ in range(max_steps):
        if logf(lo) <= y:
            break
        lo -= width
    for _ in range(max_steps):
        if logf(hi) <= y:
            break
        hi += width
    for _ in range(100):
        t = rng.uniform(lo, hi)
        if logf(t) > y:
            return t
        if t < t0:
            lo = t
        else:
            hi = t
    return t0


def scale_group_move(state, data, hyper, rng):
    """Per-factor multiplicative group move (lam_h, eta_h, omega_h,
    Omega_{h.}, Delta_{h.}) -> (c lam_h, eta_h / c, c omega_h, ...).

    The likelihood is exactly invariant, so c follows the prior-plus-
    Jacobian conditional under the Haar measure dc/c, sampled by slice on
    t = log c.  Rebalances scale between loadings and scores, which the
    row/score conditionals only adjust through each other.
    """
    n, k = state.eta.shape
    if k == 0:
        return
    gen = as_generator(rng)
    v = hyper.prior_var_coef
    # Delta rows only join the move (and the Jacobian count) when they are
    # actually free parameters
    q = data.q if data.Z is not None and hyper.covariate_interactions else 0
    d = np.maximum(state.tau[:, None] ** 2 * state.psi_local * state.phi ** 2,
                   1e-290)
    for h in range(k):
        free = state.lam_mask[:, h]
        s_eta = float(state.eta[:, h] @ state.eta[:, h])
        s_lam = float(np.sum(state.lam[free, h] ** 2 / d[free, h]))
        off = np.delete(state.Omega[h], h)
        # the interaction prior sits on the assembly coefficients, which are
        # twice the off-diagonal matrix entries
        b = s_lam + (state.omega[h] ** 2 + 4.0 * float(off @ off)) / v
        if q:
            b += float(state.Delta[h] @ state.Delta[h]) / v
        c4 = state.Omega[h, h] ** 2 / v
        # log-Jacobian exponent: loadings + omega + Omega row + diagonal + Delta - scores
        a = int(np.count_nonzero(free)) - n + k + 2 + q

        def logf(t):
            return (a * t - 0.5 * s_eta * np.exp(-2.0 * t)
                    - 0.5 * b * np.exp(2.0 * t) - 0.5 * c4 * np.exp(4.0 * t))

        c = float(np.exp(_slice_1d(logf, 0.0, gen)))
        state.lam[:, h] *= c
        state.eta[:, h] /= c
        state.omega[h] *= c
        state.Omega[h, :] *= c
        state.Omega[:, h] *= c
        if q:
            state.Delta[h, :] *= c


# ---------------------------------------------------------------------------
# initialization and the sweep
# ---------------------------------------------------------------------------

def draw_prior_params(data, hyper, gen, lam_mask=None):
    """Draw every model quantity from its prior.  X_imputed starts as the
    observed values with zeros elsewhere; call impute_missing_and_lod to fill
    the latent cells coherently."""
    n, p, k = data.n, data.p, hyper.k
    gen = as_generator(gen)
    if lam_mask is None:
        lam_mask = np.ones((p, k), dtype=bool)
    else:
        lam_mask = np.asarray(lam_mask, dtype=bool)
        if lam_mask.shape != (p, k):
            raise ValueError(f"lam_mask shape {lam_mask.shape} != ({p}, {k})")
    v = hyper.prior_var_coef
    if k:
        tau = sample_gamma(k * hyper.dl_a, 0.5, gen, size=p)
        phi = gen.dirichlet(np.full(k, hyper.dl_a), size=p)
        psi_local = gen.exponential(2.0, size=(p, k))
        lam = gen.normal(0.0, np.sqrt(psi_local) * phi * tau[:, None])
        lam[~lam_mask] = 0.0
        omega = gen.normal(0.0, np.sqrt(v), size=k)
        coef = gen.normal(0.0, np.sqrt(v), size=k * (k + 1) // 2)
        Omega = assemble_omega(coef, k)
        eta = gen.standard_normal((n, k))
    else:
        tau = np.ones(p)
        phi = np.ones((p, 0))
        psi_local = np.ones((p, 0))
        lam = np.zeros((p, 0))
        omega = np.zeros(0)
        Omega = np.zeros((0, 0))
        eta = np.zeros((n, 0))
    sigma2 = 1.0 / sample_gamma(hyper.inv_gamma_shape, hyper.inv_gamma_rate, gen)
    psi_diag = 1.0 / sample_gamma(hyper.psi_ig_shape, hyper.psi_ig_rate, gen, size=p)
    alpha = Delta = None
    if data.Z is not None:
        q = data.q
        alpha = gen.normal(0.0, np.sqrt(v), size=q)
        if hyper.covariate_interactions:
            Delta = gen.normal(0.0, np.sqrt(v), size=(k, q))
        else:
            Delta = np.zeros((k, q))
    X_imp = np.where(data.status == OBSERVED, data.X_obs, 0.0).astype(float)
    return ModelState(eta=eta, lam=lam, lam_mask=lam_mask, omega=omega,
                      Omega=Omega, sigma2=sigma2, psi_diag=psi_diag, phi=phi,
                      tau=tau, psi_local=psi_local, X_imputed=X_imp,
                      alpha=alpha, Delta=Delta)


def init_state(data, hyper, seed, lam_mask=None):
    """Starting state: a prior draw, overridden by a deterministic
    data-driven warm start (truncated SVD for the loadings and scores, a
    ridge fit for the regression block) whenever there is enough data.
    Starting far out in the heavy prior tails makes the step-size
    adaptation spend most of burn-in recovering from the transient."""
    gen = RngStream(seed, _S_INIT).generator
    state = draw_prior_params(data, hyper, gen, lam_mask)
    impute_missing_and_lod(state, data, gen)
    if hyper.k and data.n >= 10:
        _warm_start(state, data, hyper)
        impute_missing_and_lod(state, data, gen)
    return state


def _warm_start(state, data, hyper):
    n, p = state.X_imputed.shape
    k = state.lam.shape[1]
    U, s, Vt = np.linalg.svd(state.X_imputed, full_matrices=False)
    r = min(k, int(np.sum(s > 1e-8)))
    lam = np.zeros((p, k))
    lam[:, :r] = Vt[:r].T * (s[:r] / np.sqrt(n))
    lam[~state.lam_mask] = 0.0
    state.lam = lam
    eta = np.zeros((n, k))
    eta[:, :r] = np.sqrt(n) * U[:, :r]
    state.eta = eta
    resid = state.X_imputed - eta @ lam.T
    state.psi_diag = np.maximum(np.einsum("ij,ij->j", resid, resid) / n, 1e-2)
    abs_lam = np.abs(lam)
    state.tau = np.maximum(abs_lam.sum(axis=1), 0.1)
    state.phi = (abs_lam + 1e-2) / (abs_lam + 1e-2).sum(axis=1, keepdims=True)
    state.psi_local = np.ones((p, k))

    pairs = monomial_pairs(k)
    q = data.q if data.Z is not None else 0
    design = np.empty((n, k + len(pairs) + q))
    design[:, :k] = eta
    for c, (h, l) in enumerate(pairs):
        design[:, k + c] = eta[:, h] * eta[:, l]
    if q:
        design[:, k + len(pairs):] = data.Z
    y = data.y
    coef = np.linalg.solve(design.T @ design + np.eye(design.shape[1]),
                           design.T @ y)
    state.omega = coef[:k]
    state.Omega = assemble_omega(coef[k:k + len(pairs)], k)
    if q:
        state.alpha = coef[k + len(pairs):]
        state.Delta = np.zeros((k, q))
    fit_resid = y - design @ coef
    # no coarse floor: a high-R^2 response on the standardized scale can
    # have genuine noise well below 1e-2
    state.sigma2 = max(float(fit_resid @ fit_resid) / n, 1e-8)


def one_sweep(state, data, hyper, step, seed, iteration):
    """One composite update cycle; returns the mean accepted MALA fraction.

    The scores and the blocks they are tightly coupled to — regression
    coefficients, noise, residual variances, loading rows — cycle
    `inner_rounds` times: alternating exact conditionals between eta and
    the rest mixes at the rate of their mutual information, and at n in the
    hundreds the conditional-to-marginal variance ratio of psi and the
    induced coefficients is around 0.1, so single-scan autocorrelation
    times sit near 20 sweeps.  The collapsed psi move plus the immediate
    loading redraw (partially collapsed Gibbs — order is load-bearing) and
    the score refresh cut that to a few rounds.  The shrinkage locals,
    the conjugate psi draw, the scale group move and the imputation run
    once per cycle: clocking the locals inside the rounds was measured
    autocorrelation-neutral for the induced coefficients and costs about
    a third of the round budget, so the rounds go to the moves that earn
    them.  Each step code keeps one stream per cycle, consumed across
    rounds, so schedules stay reproducible.
    """
    def stream(code):
        return RngStream(seed, _STREAMS_PER_ITER * iteration + code).generator

    g_refresh = stream(_S_REFRESH)
    g_eta = stream(_S_ETA)
    g_omega = stream(_S_OMEGA)
    g_bigomega = stream(_S_BIGOMEGA)
    g_alpha = stream(_S_ALPHA_DELTA)
    g_sigma2 = stream(_S_SIGMA2)
    g_psi_mh = stream(_S_PSI_MH)
    g_lambda = stream(_S_LAMBDA)
    g_dl = stream(_S_DL)
    accept = 0.0
    for _ in range(hyper.inner_rounds):
        eta_refresh(state, data, g_refresh)
        accept += float(np.mean(mala_update_eta(state, data, step, g_eta)))
        gibbs_omega(state, data, hyper, g_omega)
        gibbs_Omega(state, data, hyper, g_bigomega)
        gibbs_alpha_delta(state, data, hyper, g_alpha)
        gibbs_sigma2(state, data, hyper, g_sigma2)
        psi_marginal_mh(state, data, hyper, g_psi_mh)
        psi_marginal_mh(state, data, hyper, g_psi_mh)
        gibbs_lambda_rows(state, data, hyper, g_lambda)
    dl_local_updates(state, hyper, g_dl)
    gibbs_psi_diag(state, data, hyper, stream(_S_PSI))
    scale_group_move(state, data, hyper, stream(_S_SCALE))
    impute_missing_and_lod(state, data, stream(_S_IMPUTE))
    return accept / hyper.inner_rounds


def _check_finite(state, iteration):
    blocks = [("eta", state.eta), ("omega", state.omega), ("Omega", state.Omega),
              ("lam", state.lam), ("sigma2", np.asarray(state.sigma2)),
              ("psi_diag", state.psi_diag), ("tau", state.tau),
              ("X_imputed", state.X_imputed)]
    if state.alpha is not None:
        blocks += [("alpha", state.alpha), ("Delta", state.Delta)]
    for name, arr in blocks:
        if not np.all(np.isfinite(arr)):
            raise ChainDivergenceError(iteration, name)


def run_chain(data, hyper, seed=None, X_test=None, Z_test=None, lam_mask=None,
              keep_loadings=True):
    """Run one chain and collect induced-coefficient draws.  `seed` defaults
    to the one in `hyper`; multi-chain callers pass a distinct seed each.

    The MALA step adapts toward `mala_target_accept` during burn-in only
    (Robbins-Monro on the log step) and is frozen afterward.  After burn-in,
    each kept iteration maps (Lambda, Psi, omega, Omega[, Delta]) to the
    induced predictor-scale coefficients; when `X_test` is given, exact
    posterior-predictive draws are generated by simulating the latent scores
    of each test row.
    """
    if seed is None:
        seed = hyper.seed
    if hyper.k > data.p:
        warnings.warn(f"k={hyper.k} exceeds p={data.p}; the factor model is overparameterized")
    if X_test is not None:
        X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
        if Z_test is not None:
            Z_test = np.atleast_2d(np.asarray(Z_test, dtype=float))
    state = init_state(data, hyper, seed, lam_mask)
    n_kept = hyper.n_iter - hyper.n_burn
    p, q = data.p, data.q
    intercept = np.empty(n_kept)
    beta = np.empty((n_kept, p))
    omega_x = np.empty((n_kept, p, p))
    sigma2_draws = np.empty(n_kept)
    covint = np.empty((n_kept, p, q)) if data.Z is not None else None
    alpha_draws = np.empty((n_kept, q)) if data.Z is not None else None
    predictive = np.empty((X_test.shape[0], n_kept)) if X_test is not None else None
    miss_cells = list(zip(*np.nonzero(data.status != OBSERVED)))
    imp_sum = np.zeros(len(miss_cells))
    imp_sumsq = np.zeros(len(miss_cells))
    loadings_sum = np.zeros_like(state.lam) if keep_loadings else None
    cell_idx = tuple(np.array(miss_cells).T) if miss_cells else None

    # dual-averaging adaptation of the log step during burn-in; frozen at
    # the averaged iterate afterward
    log_step = np.log(hyper.mala_step)
    da_mu = np.log(10.0) + log_step
    da_hbar = 0.0
    da_log_bar = log_step
    da_gamma, da_t0, da_kappa = 0.05, 10.0, 0.75
    accept_sum = 0.0
    for t in range(1, hyper.n_iter + 1):
        acc = one_sweep(state, data, hyper, np.exp(log_step), seed, t)
        _check_finite(state, t)
        if hyper.debug_validate:
            state.validate(data)
        if t <= hyper.n_burn:
            w = 1.0 / (t + da_t0)
            da_hbar = (1.0 - w) * da_hbar + w * (hyper.mala_target_accept - acc)
            log_step = da_mu - np.sqrt(t) / da_gamma * da_hbar
            log_step = float(np.clip(log_step, np.log(1e-8), np.log(1e3)))
            da_log_bar = (t ** -da_kappa) * log_step + (1.0 - t ** -da_kappa) * da_log_bar
            if t == hyper.n_burn:
                log_step = da_log_bar
        else:
            s = t - hyper.n_burn - 1
            accept_sum += acc
            mom = factor_posterior_moments(state.lam, state.psi_diag)
            ind = induced_coefficients(mom, state.omega, state.Omega,
                                       Delta=state.Delta if data.Z is not None else None)
            intercept[s] = ind.intercept
            beta[s] = ind.beta
            omega_x[s] = ind.omega_x
            sigma2_draws[s] = state.sigma2
            if data.Z is not None:
                covint[s] = ind.covint
                alpha_draws[s] = state.alpha
            if cell_idx is not None:
                vals = state.X_imputed[cell_idx]
                imp_sum += vals
                imp_sumsq += vals * vals
            if keep_loadings:
                loadings_sum += state.lam
            if X_test is not None:
                gen = RngStream(seed, _STREAMS_PER_ITER * t + _S_PREDICT).generator
                predictive[:, s] = _predictive_draw(state, mom, X_test, Z_test, gen)

    ess_beta = np.array([ess_info(beta[:, j])[0] for j in range(p)]) \
        if n_kept >= 10 else np.full(p, np.nan)
    imp_mean = imp_sd = None
    if cell_idx is not None:
        imp_mean = imp_sum / n_kept
        var = np.maximum(imp_sumsq / n_kept - imp_mean ** 2, 0.0)
        imp_sd = np.sqrt(var)
    return ChainOutput(
        intercept=intercept, beta=beta, omega_x=omega_x,
        sigma2_draws=sigma2_draws,
        accept_rate_eta=accept_sum / n_kept,
        mala_step_final=float(np.exp(log_step)),
        ess_beta=ess_beta, seed=seed,
        covint=covint, alpha_draws=alpha_draws,
        predictive_draws=predictive,
        imputed_cells=miss_cells, imputed_mean=imp_mean, imputed_sd=imp_sd,
        loadings_mean=(loadings_sum / n_kept) if keep_loadings else None)


def _predictive_draw(state, mom, X_test, Z_test, gen):
    """One exact posterior-predictive draw per test row: simulate the latent
    scores from eta | x, then the response from the quadratic model."""
    n_test = X_test.shape[0]
    k = mom.k
    if k:
        mu = X_test @ mom.A.T
        chol = np.linalg.cholesky(mom.V)
        eta_star = mu + gen.standard_normal((n_test, k)) @ chol.T
        if Z_test is not None:
            omega_eff = state.omega[None, :] + Z_test @ state.Delta.T
        else:
            omega_eff = state.omega[None, :]
        mean = (np.einsum("ij,ij->i", eta_star, omega_eff)
                + np.einsum("ij,jl,il->i", eta_star, state.Omega, eta_star))
    else:
        mean = np.zeros(n_test)
    if Z_test is not None:
        mean = mean + Z_test @ state.alpha
    return mean + np.sqrt(state.sigma2) * gen.standard_normal(n_test)
