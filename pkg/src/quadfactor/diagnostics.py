"""Chain diagnostics: effective sample size via Geyer's initial monotone
positive sequence estimator."""

import numpy as np


def _autocovariance(x):
    n = x.size
    xc = x - x.mean()
    m = 1
    while m < 2 * n:
        m <<= 1
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f))[:n].real / n
    return acov


def ess_info(draws, rel_tol=1e-12):
    """Effective sample size and a degeneracy flag.

    Pairs successive autocovariances (Geyer's initial sequence), keeps them
    while positive, enforces monotone decay with a running minimum, and
    returns n / tau where tau is the integrated autocorrelation time.
    A (near-)constant sequence carries no mixing information; it is flagged
    and reported as ESS = n.
    """
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError(f"ess requires at least 10 draws, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ess requires finite draws")
    scale = max(np.abs(x).max(), 1.0)
    if np.ptp(x) <= rel_tol * scale:
        return float(n), True
    acov = _autocovariance(x)
    g0 = acov[0]
    if g0 <= (rel_tol * scale) ** 2:
        return float(n), True
    n_pairs = n // 2
    pair = acov[0:2 * n_pairs:2] + acov[1:2 * n_pairs:2]
    total = 0.0
    running_min = np.inf
    for gam in pair:
        if gam <= 0.0:
            break
        running_min = min(running_min, gam)
        total += running_min
    tau = max(-1.0 + 2.0 * total / g0, 1e-12)
    return float(n / tau), False


def ess(draws):
    """Effective sample size of a scalar chain (see ess_info)."""
    return ess_info(draws)[0]
