"""Random variate generators used by the Gibbs/MALA engine.

All samplers draw through an explicit generator so that every draw is
reproducible from a (seed, stream_id) pair, and so that units updated in
parallel can each own an independent stream.  Counter-based bit generators
(Philox) make streams for distinct ids independent without coordination.

Conventions
-----------
Gamma(shape, rate) uses the rate parameterization, mean = shape / rate.
InverseGaussian(mu, lam) has density proportional to
x^{-3/2} exp(-lam (x - mu)^2 / (2 mu^2 x)) and variance mu^3 / lam.
GIG(p, a, b) has density proportional to x^{p-1} exp(-(a x + b / x) / 2).
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import ndtr, ndtri


class PositiveDefiniteError(ValueError):
    """Cholesky factorization failed for a matrix that must be SPD."""

    def __init__(self, context, detail=""):
        self.context = context
        msg = f"matrix not positive definite in {context}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass(frozen=True)
class RngStream:
    """Independent random stream keyed by (seed, stream_id).

    Two streams with the same key produce bitwise-identical sequences;
    streams with different keys are statistically independent, so units
    updated concurrently can each be assigned their own id and the result
    does not depend on execution order.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ValueError(f"{name} must fit in uint64, got {v}")

    @cached_property
    def generator(self):
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng):
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator
    raise TypeError(f"expected RngStream, Generator or int, got {type(rng)!r}")


# ---------------------------------------------------------------------------
# multivariate normal
# ---------------------------------------------------------------------------

def sample_mvn(mean, scale, rng, form="covariance", context="sample_mvn",
               degenerate_tol=1e-12):
    """Draw one vector from N(mean, Sigma).

    Parameters
    ----------
    mean : (m,) array
    scale : (m, m) array
        Either the covariance or the precision matrix, per `form`.
    form : {"covariance", "precision"}
    context : str
        Name of the calling update, included in factorization errors.
    degenerate_tol : float
        With `form="covariance"`, if every entry of `scale` is below this
        tolerance in absolute value the distribution is treated as a point
        mass and `mean` is returned exactly.
    """
    mean = np.asarray(mean, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if form not in ("covariance", "precision"):
        raise ValueError(f"form must be 'covariance' or 'precision', got {form!r}")
    if scale.shape != (mean.size, mean.size):
        raise ValueError(f"scale shape {scale.shape} does not match mean size {mean.size}")
    if form == "covariance" and np.all(np.abs(scale) <= degenerate_tol):
        return mean.copy()
    try:
        chol = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as e:
        raise PositiveDefiniteError(context, str(e)) from None
    z = as_generator(rng).standard_normal(mean.size)
    if form == "covariance":
        return mean + chol @ z
    # precision form: solve L^T x = z so that x ~ N(0, prec^{-1})
    from scipy.linalg import solve_triangular
    return mean + solve_triangular(chol, z, lower=True, trans="T")


def sample_mvn_precision(prec, rhs, rng, context="sample_mvn_precision"):
    """Draw from N(H^{-1} rhs, H^{-1}) given precision H and linear term rhs.

    A single Cholesky of H serves both the mean solve and the noise draw;
    H is never inverted explicitly.  Returns (draw, mean).
    """
    prec = np.asarray(prec, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as e:
        raise PositiveDefiniteError(context, str(e)) from None
    from scipy.linalg import cho_solve, solve_triangular
    mean = cho_solve((chol, True), rhs)
    z = as_generator(rng).standard_normal(rhs.size)
    draw = mean + solve_triangular(chol, z, lower=True, trans="T")
    return draw, mean


# ---------------------------------------------------------------------------
# inverse Gaussian
# ---------------------------------------------------------------------------

def sample_inverse_gaussian(mu, lam, rng, size=None):
    """Inverse-Gaussian draws with mean mu and shape lam (elementwise)."""
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(mu <= 0):
        raise ValueError(f"mu must be positive, got min {np.min(mu)}")
    if np.any(lam <= 0):
        raise ValueError(f"lam must be positive, got min {np.min(lam)}")
    out = as_generator(rng).wald(mu, lam, size=size)
    return out


# ---------------------------------------------------------------------------
# generalized inverse Gaussian
# ---------------------------------------------------------------------------

_GIG_B_FLOOR = 1e-12


def _gig_rou_shifted(p, omega, gen, n_lanes, max_rounds=2000):
    """Ratio-of-uniforms with mode shift for the standard form
    h(y) = y^{p-1} exp(-omega (y + 1/y) / 2), p >= 0.

    `omega` may differ per lane; all lanes run one shared rejection loop
    (one cheap numpy pass per round instead of a Python pass per distinct
    omega — the shrinkage updates draw one variate each for p*k loadings).
    Bounds come from the cubic stationarity condition of (y - m)^2 h(y),
    solved in closed form, Newton-polished, and the u-interval inflated
    slightly so the acceptance region is always enclosed.
    """
    omega = np.broadcast_to(np.asarray(omega, dtype=float), (n_lanes,))
    r = (p - 1.0) / omega
    m = r + np.sqrt(1.0 + r * r)  # mode

    def log_h(y, m_, om):
        # normalized so log_h(m) = 0
        return (p - 1.0) * np.log(y / m_) - 0.5 * om * (y - m_ + 1.0 / y - 1.0 / m_)

    c2 = -(2.0 * (p + 1.0) / omega + m)
    c1 = 2.0 * m * (p - 1.0) / omega - 1.0
    c0 = m
    # three real roots y_neg < 0 < y_lo < m < y_hi, by the trigonometric
    # formula for the depressed cubic t^3 + pc t + qc
    pc = c1 - c2 * c2 / 3.0
    qc = c2 * (2.0 * c2 * c2 - 9.0 * c1) / 27.0 + c0
    with np.errstate(invalid="ignore", divide="ignore"):
        rad = np.sqrt(np.maximum(-pc / 3.0, 0.0))
        arg = np.clip(3.0 * qc / (2.0 * pc * np.where(rad > 0, rad, 1.0)), -1.0, 1.0)
        theta = np.arccos(arg)
        t1 = 2.0 * rad * np.cos(theta / 3.0 - 2.0 * np.pi / 3.0)
        t2 = 2.0 * rad * np.cos(theta / 3.0)
    y_lo = t1 - c2 / 3.0
    y_hi = t2 - c2 / 3.0
    collapsed = ~((rad > 0) & np.isfinite(y_lo) & np.isfinite(y_hi)
                  & (y_lo > 0) & (y_hi > y_lo))
    y_lo = np.where(collapsed, 0.5 * m, y_lo)
    y_hi = np.where(collapsed, 2.0 * m, y_hi)

    def cubic(y):
        return ((y + c2) * y + c1) * y + c0

    def dcubic(y):
        return (3.0 * y + 2.0 * c2) * y + c1

    for _ in range(3):
        d = dcubic(y_lo)
        y_lo = y_lo - np.where(d != 0, cubic(y_lo) / np.where(d != 0, d, 1.0), 0.0)
        d = dcubic(y_hi)
        y_hi = y_hi - np.where(d != 0, cubic(y_hi) / np.where(d != 0, d, 1.0), 0.0)
    y_lo = np.clip(y_lo, 1e-300, m * (1 - 1e-12))
    y_hi = np.maximum(y_hi, m * (1 + 1e-12))
    u_lo = (y_lo - m) * np.exp(0.5 * log_h(y_lo, m, omega)) * (1 + 1e-9)
    u_hi = (y_hi - m) * np.exp(0.5 * log_h(y_hi, m, omega)) * (1 + 1e-9)

    out = np.empty(n_lanes)
    todo = np.arange(n_lanes)
    for _ in range(max_rounds):
        k = todo.size
        u = gen.uniform(u_lo[todo], u_hi[todo], size=k)
        v = gen.uniform(0.0, 1.0, size=k)
        y = m[todo] + u / v
        ok = y > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ok &= 2.0 * np.log(v) <= log_h(np.where(ok, y, 1.0), m[todo], omega[todo])
        out[todo[ok]] = y[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
    raise RuntimeError(
        f"GIG ratio-of-uniforms failed to accept after {max_rounds} rounds "
        f"(p={p}, omega range [{omega.min()}, {omega.max()}])")


def _gig_logconcave(p, omega, gen, n_lanes, max_rounds=2000):
    """Rejection in t = log y space where the density exp(p t - omega cosh t)
    is always log-concave.  Uniform center piece between the points where the
    log density drops one unit below the mode, exponential tails beyond.
    Robust for 0 <= p < 1 with small omega, where ratio-of-uniforms thins out.
    """
    t_star = np.arcsinh(p / omega)

    def g(t):
        return p * t - omega * np.cosh(t)

    g_max = g(t_star)

    def g0(t):  # normalized: g0(t_star) = 0
        return g(t) - g_max

    def dg(t):
        return p - omega * np.sinh(t)

    def find_drop(side):
        # solve g0(t) = -1 on the given side of the mode by expanding then bisecting
        step = 1.0
        lo = t_star
        hi = t_star + side * step
        while g0(hi) > -1.0:
            step *= 2.0
            hi = t_star + side * step
            if step > 1e8:
                break
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if g0(mid) > -1.0:
                lo = mid
            else:
                hi = mid
        return hi

    t_hi = find_drop(+1.0)
    t_lo = find_drop(-1.0)
    s_hi = dg(t_hi)   # negative slope
    s_lo = dg(t_lo)   # positive slope
    w_mid = t_hi - t_lo
    w_right = np.exp(-1.0) / max(-s_hi, 1e-300)
    w_left = np.exp(-1.0) / max(s_lo, 1e-300)
    w_tot = w_mid + w_right + w_left

    out = np.empty(n_lanes)
    todo = np.arange(n_lanes)
    for _ in range(max_rounds):
        k = todo.size
        piece = gen.uniform(0.0, w_tot, size=k)
        e = gen.standard_exponential(size=k)
        u = gen.uniform(size=k)
        t = np.empty(k)
        log_env = np.empty(k)
        mid = piece < w_mid
        t[mid] = t_lo + piece[mid]
        log_env[mid] = 0.0
        right = (~mid) & (piece < w_mid + w_right)
        t[right] = t_hi + e[right] / (-s_hi)
        log_env[right] = -1.0 + s_hi * (t[right] - t_hi)
        left = (~mid) & (~right)
        t[left] = t_lo - e[left] / s_lo
        log_env[left] = -1.0 + s_lo * (t[left] - t_lo)
        ok = np.log(u) <= g0(t) - log_env
        out[todo[ok]] = np.exp(t[ok])
        todo = todo[~ok]
        if todo.size == 0:
            return out
    raise RuntimeError(
        f"GIG log-concave rejection failed after {max_rounds} rounds "
        f"(p={p}, omega={omega})")


def sample_gig(p, a, b, rng, size=None):
    """Generalized inverse Gaussian draws, density ~ x^{p-1} exp(-(a x + b/x)/2).

    Negative orders use the reciprocal identity 1/GIG(p, a, b) = GIG(-p, b, a).
    When b <= 1e-12 with p > 0 the proper Gamma(p, a/2) limit is returned
    instead of degrading the rejection samplers.  Scalar parameters `a`, `b`
    may be arrays; `p` is a scalar order.

    Special cases: GIG(-1/2, lam/mu^2, lam) is InverseGaussian(mu, lam), and
    b -> 0 with p > 0 recovers Gamma(p, a/2).
    """
    p = float(p)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0):
        raise ValueError(f"a must be positive, got min {np.min(a)}")
    if np.any(b < 0):
        raise ValueError(f"b must be nonnegative, got min {np.min(b)}")
    gen = as_generator(rng)

    if p == -0.5:
        # exact identity, one vectorized draw: the rejection path costs a
        # Python-level pass per distinct omega, which the shrinkage updates
        # (order a-1 = -1/2 at the default a) would pay per loading entry
        if np.any(b <= 0):
            raise ValueError("b must be positive for negative order")
        shape = np.broadcast_shapes(a.shape, b.shape) if size is None else tuple(np.atleast_1d(size))
        a_ = np.broadcast_to(a, shape)
        b_ = np.broadcast_to(b, shape)
        out = np.asarray(gen.wald(np.sqrt(b_ / a_), b_))
        if size is None and shape == ():
            return float(out)
        return out.reshape(shape)

    if p < 0:
        return 1.0 / sample_gig(-p, b, a, gen, size=size)

    shape = np.broadcast_shapes(a.shape, b.shape) if size is None else tuple(np.atleast_1d(size))
    a = np.broadcast_to(a, shape).ravel().copy()
    b = np.broadcast_to(b, shape).ravel().copy()
    n = a.size
    out = np.empty(n)

    degenerate = (b <= _GIG_B_FLOOR) & (p > 0)
    if np.any(degenerate):
        out[degenerate] = gen.gamma(p, 1.0 / (0.5 * a[degenerate]))
    live = ~degenerate
    if np.any(live):
        b_live = np.maximum(b[live], _GIG_B_FLOOR)  # keep p == 0 proper
        omega = np.sqrt(a[live] * b_live)
        scale = np.sqrt(b_live / a[live])
        y = np.empty(omega.size)
        heavy = (omega >= 1.0) | (p >= 1.0)
        if np.any(heavy):
            y[heavy] = _gig_rou_shifted(p, omega[heavy], gen, int(heavy.sum()))
        # the log-concave sampler builds a scalar envelope: draws with equal
        # omega share one rejection pass
        rest = np.nonzero(~heavy)[0]
        order = rest[np.argsort(omega[rest])]
        om_sorted = omega[order]
        start = 0
        while start < om_sorted.size:
            stop = start
            while stop < om_sorted.size and om_sorted[stop] == om_sorted[start]:
                stop += 1
            idx = order[start:stop]
            y[idx] = _gig_logconcave(p, om_sorted[start], gen, idx.size)
            start = stop
        out[live] = scale * y
    out = out.reshape(shape)
    if size is None and shape == ():
        return float(out)
    return out


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

_TAIL_CUT = 4.0


def _robert_tail(a, b, gen, max_rounds=10000):
    """One-sided standard-normal tail sampler on [a, b), a >= 0, via an
    exponential proposal (translated-exponential rejection)."""
    n = a.size
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty(n)
    todo = np.arange(n)
    for _ in range(max_rounds):
        k = todo.size
        z = a[todo] + gen.standard_exponential(k) / alpha[todo]
        accept = gen.uniform(size=k) <= np.exp(-0.5 * (z - alpha[todo]) ** 2)
        accept &= z <= b[todo]
        out[todo[accept]] = z[accept]
        todo = todo[~accept]
        if todo.size == 0:
            return out
    raise RuntimeError("truncated-normal tail sampler failed to accept; "
                       f"{todo.size} lanes stuck, min a={a[todo].min()}")


def sample_truncated_normal(mu, sigma2, lower, upper, rng, size=None):
    """Normal(mu, sigma2) restricted to [lower, upper], elementwise.

    Mild truncation uses inverse-CDF sampling; intervals starting more than
    4 standard deviations into a tail switch to an exponential-proposal
    rejection sampler, with survival-scale inversion for finite deep-tail
    intervals, so draws stay finite and inside the support.
    """
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError(f"sigma2 must be positive, got min {np.min(sigma2)}")
    shape = np.broadcast_shapes(mu.shape, sigma2.shape,
                                np.shape(lower), np.shape(upper))
    if size is not None:
        shape = np.broadcast_shapes(shape, tuple(np.atleast_1d(size)))
    mu = np.broadcast_to(mu, shape).ravel()
    sd = np.sqrt(np.broadcast_to(sigma2, shape)).ravel()
    lo = np.broadcast_to(np.asarray(lower, dtype=float), shape).ravel()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), shape).ravel()
    if np.any(lo >= hi):
        bad = np.argmax(lo >= hi)
        raise ValueError(f"lower >= upper at flat index {bad}: [{lo[bad]}, {hi[bad]}]")
    gen = as_generator(rng)

    a = (lo - mu) / sd
    b = (hi - mu) / sd
    # flip left-tail intervals so every deep tail is a right tail
    flip = b <= 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)

    z = np.empty(a2.size)
    deep = a2 >= _TAIL_CUT
    mild = ~deep
    if np.any(mild):
        pa = ndtr(a2[mild])
        pb = ndtr(b2[mild])
        u = gen.uniform(size=int(mild.sum()))
        z[mild] = ndtri(pa + u * (pb - pa))
    if np.any(deep):
        sf_a = ndtr(-a2[deep])  # exact survival values, no cancellation
        sf_b = ndtr(-b2[deep])
        finite = np.isfinite(b2[deep]) & (sf_a > 0)
        zd = np.empty(int(deep.sum()))
        if np.any(finite):
            u = gen.uniform(size=int(finite.sum()))
            zd[finite] = -ndtri(sf_b[finite] + u * (sf_a[finite] - sf_b[finite]))
        rej = ~finite
        if np.any(rej):
            zd[rej] = _robert_tail(a2[deep][rej], b2[deep][rej], gen)
        z[deep] = zd
    z = np.where(flip, -z, z)
    z = np.clip(z, a, b)  # guard the extreme float edges of inverse-CDF
    out = (mu + sd * z).reshape(shape)
    if size is None and shape == ():
        return float(out)
    return out


# ---------------------------------------------------------------------------
# gamma and Dirichlet
# ---------------------------------------------------------------------------

def sample_gamma(shape, rate, rng, size=None):
    """Gamma draws in the (shape, rate) parameterization, mean shape/rate."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0):
        raise ValueError(f"shape must be positive, got min {np.min(shape)}")
    if np.any(rate <= 0):
        raise ValueError(f"rate must be positive, got min {np.min(rate)}")
    return as_generator(rng).gamma(shape, 1.0 / rate, size=size)


def sample_dirichlet(alpha, rng, dim=None, max_rounds=100):
    """Dirichlet draws along the last axis via normalized gamma variates.

    `alpha` may be any array whose last axis is the simplex dimension, or a
    scalar concentration together with `dim` for the symmetric case.  Rows
    whose gamma draws all underflow to zero are redrawn rather than
    renormalized into NaN.
    """
    alpha = np.asarray(alpha, dtype=float)
    if dim is not None:
        if alpha.ndim != 0:
            raise ValueError("dim is only meaningful with a scalar concentration")
        alpha = np.full(int(dim), float(alpha))
    if np.any(alpha <= 0):
        raise ValueError(f"alpha must be positive, got min {np.min(alpha)}")
    gen = as_generator(rng)
    g = gen.gamma(alpha, 1.0)
    total = g.sum(axis=-1, keepdims=True)
    for _ in range(max_rounds):
        dead = (total <= 0).ravel()
        if not dead.any():
            break
        redraw = gen.gamma(alpha, 1.0)
        g = np.where(total <= 0, redraw, g)
        total = g.sum(axis=-1, keepdims=True)
    else:
        raise RuntimeError("Dirichlet draw underflowed to zero repeatedly; "
                           f"min alpha={alpha.min()}")
    return g / total
