"""Two one-sided tests on pooled effects, BH adjustment and marker screening."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EquivalenceResult:
    marker_id: str
    p_lower: float
    p_upper: float
    p_tost: float
    p_adjusted: float
    epsilon: float
    significant: bool


def _cdf(x, df):
    x = np.asarray(x, dtype=float)
    df = np.broadcast_to(np.asarray(df, dtype=float), x.shape)
    return np.where(np.isinf(df), stats.norm.cdf(x), stats.t.cdf(x, np.where(np.isinf(df), 1.0, df)))


def tost_p_values(mu, se, df, epsilon):
    """Vectorised TOST p-values; returns ``(p_lower, p_upper, p_tost)`` arrays.

    ``df = inf`` uses the normal reference. With ``se == 0`` the estimate is a
    point mass: each one-sided p-value is 0, 1/2 or 1 according to whether the
    estimate is inside, on, or outside that bound.
    """
    mu, se = np.broadcast_arrays(np.asarray(mu, float), np.asarray(se, float))
    eps = np.broadcast_to(np.asarray(epsilon, float), mu.shape)
    if np.any(eps <= 0):
        raise ValueError("epsilon must be positive")
    if np.any(se < 0):
        raise ValueError("standard error must be non-negative")
    zero = se == 0
    safe = np.where(zero, 1.0, se)
    p_lo = 1.0 - _cdf((mu + eps) / safe, df)
    p_up = _cdf((mu - eps) / safe, df)
    p_lo = np.where(zero, np.where(mu > -eps, 0.0, np.where(mu == -eps, 0.5, 1.0)), p_lo)
    p_up = np.where(zero, np.where(mu < eps, 0.0, np.where(mu == eps, 0.5, 1.0)), p_up)
    return p_lo, p_up, np.maximum(p_lo, p_up)


def tost_p(mu_hat, se, df, epsilon):
    """TOST for ``|mu| < epsilon``: ``(p_lower, p_upper, p_tost)``.

    ``p_lower = 1 - F_df((mu + eps)/se)`` tests ``mu <= -eps``;
    ``p_upper = F_df((mu - eps)/se)`` tests ``mu >= eps``.
    """
    if df is not None and not np.isinf(df) and df < 1:
        raise ValueError("df must be >= 1")
    lo, up, p = tost_p_values(mu_hat, se, df, epsilon)
    return float(lo), float(up), float(p)


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values, in the input order."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("p must be one-dimensional")
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    n = p.size
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * n / np.arange(1, n + 1)
    ranked = np.minimum(1.0, np.minimum.accumulate(ranked[::-1])[::-1])
    out = np.empty(n)
    out[order] = ranked
    return out


def screen_markers(results, alpha=0.05) -> list[str]:
    """Marker ids with adjusted p-value strictly below ``alpha``, sorted by id."""
    chosen = sorted(r.marker_id for r in results if r.p_adjusted < alpha)
    if not chosen:
        logger.warning("no marker passed screening at alpha=%g", alpha)
    return chosen


def equivalence_results(marker_ids, mu, se, df, epsilon, alpha=0.05) -> list[EquivalenceResult]:
    """TOST + BH for a vector of markers."""
    lo, up, p = tost_p_values(mu, se, df, epsilon)
    adj = bh_adjust(p)
    eps = np.broadcast_to(np.asarray(epsilon, float), p.shape)
    return [
        EquivalenceResult(str(m), float(a), float(b), float(c), float(d), float(e), bool(d < alpha))
        for m, a, b, c, d, e in zip(marker_ids, lo, up, p, adj, eps)
    ]


def lead(mu_hat, se, df, alpha=0.05, *, tol=1e-12, max_iter=200) -> float:
    """Least equivalence allowable difference: smallest bound with ``p_tost == alpha``.

    Found by bisection on the bound; ``p_tost`` is nonincreasing in it.
    """
    if se == 0:
        return abs(mu_hat)
    lo, hi = 0.0, abs(mu_hat) + se
    while tost_p(mu_hat, se, df, hi)[2] > alpha:
        hi *= 2
    lo = max(lo, 1e-300)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if tost_p(mu_hat, se, df, mid)[2] > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return hi
