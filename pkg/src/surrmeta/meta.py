"""Random-effects pooling of per-study surrogacy estimates.

Between-study variance is estimated by REML: a fixed-point iteration on the
REML estimating equation, with bounded golden-section maximisation of the
restricted log-likelihood as fallback. The pooled mean is the inverse total
variance weighted mean; its variance is either the conventional ``1/sum(w)`` or
the Hartung-Knapp-Sidik-Jonkman rescaling with a ``t(M-1)`` reference.

The batch functions work on ``(J, M)`` arrays (one row per marker) with an
optional boolean mask of available studies; the scalar API wraps them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .validation import InsufficientDataError, SingularityError, check_level

FE, RE = "FE", "RE"
CONVENTIONAL, HKSJ = "conventional", "HKSJ"

REML_TOL = 1e-10
REML_MAX_ITER = 200
_GOLDEN = (math.sqrt(5) - 1) / 2


class DegenerateIntervalWarning(UserWarning):
    """Standard error is zero, so the interval collapses to a point."""


@dataclass(frozen=True)
class MetaInput:
    marker_id: str
    deltas: np.ndarray
    variances: np.ndarray
    study_ids: tuple = ()
    n_per_study: tuple = ()

    def __post_init__(self):
        d = np.asarray(self.deltas, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "variances", v)
        if d.ndim != 1 or d.shape != v.shape:
            raise ValueError("deltas and variances must be 1-D arrays of equal length")
        if len(d) < 2:
            raise InsufficientDataError("meta-analysis needs at least 2 studies")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite delta or variance")
        if np.any(v < 0):
            raise ValueError("variances must be non-negative")

    @property
    def n_studies(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class PooledResult:
    mu_hat: float
    tau2_hat: float
    se_pooled: float
    q_scale: float
    ci_low: float
    ci_high: float
    pi_low: float
    pi_high: float
    method: str
    variance_method: str
    df: float
    n_studies: int
    level: float = 0.95
    pi_level: float = 0.95
    weights: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    marker_id: str = ""


# ------------------------------------------------------------ batch core


def _prepare(deltas, variances, mask):
    d = np.atleast_2d(np.asarray(deltas, dtype=float))
    v = np.atleast_2d(np.asarray(variances, dtype=float))
    if mask is None:
        mask = np.isfinite(d) & np.isfinite(v)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    d = np.where(mask, d, 0.0)
    v = np.where(mask, v, 1.0)
    if np.any(v < 0):
        raise ValueError("variances must be non-negative")
    return d, v, mask


def _weights(v, t, mask):
    with np.errstate(divide="ignore", over="ignore"):
        w = 1.0 / (v + t[:, None])
    return np.where(mask, w, 0.0)


def _loglik(t, d, v, mask):
    """Restricted log-likelihood (constants dropped) for each row at ``t``."""
    w = _weights(v, t, mask)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        sw = w.sum(axis=1)
        mu = (w * d).sum(axis=1) / sw
        resid = (w * (d - mu[:, None]) ** 2).sum(axis=1)
        logdet = np.where(mask, np.log(np.where(mask, v + t[:, None], 1.0)), 0.0).sum(axis=1)
        return -0.5 * (logdet + np.log(sw) + resid)


def _sample_var(d, mask):
    m = mask.sum(axis=1)
    mean = (d * mask).sum(axis=1) / m
    return (((d - mean[:, None]) ** 2) * mask).sum(axis=1) / (m - 1)


def _golden_max(d, v, mask, lo, hi, tol=1e-13, max_iter=300):
    """Vectorised golden-section maximisation of the restricted log-likelihood."""
    a, b = lo.copy(), hi.copy()
    c = b - _GOLDEN * (b - a)
    e = a + _GOLDEN * (b - a)
    fc, fe = _loglik(c, d, v, mask), _loglik(e, d, v, mask)
    for _ in range(max_iter):
        if np.all(b - a <= tol * np.maximum(1.0, b)):
            break
        left = fc >= fe
        b = np.where(left, e, b)
        a = np.where(left, a, c)
        new_c = b - _GOLDEN * (b - a)
        new_e = a + _GOLDEN * (b - a)
        # reuse the surviving interior point
        e_next = np.where(left, c, new_e)
        c_next = np.where(left, new_c, e)
        fe_next = np.where(left, fc, np.nan)
        fc_next = np.where(left, np.nan, fe)
        need_c = left
        need_e = ~left
        if need_c.any():
            fc_next = np.where(need_c, _loglik(c_next, d, v, mask), fc_next)
        if need_e.any():
            fe_next = np.where(need_e, _loglik(e_next, d, v, mask), fe_next)
        c, e, fc, fe = c_next, e_next, fc_next, fe_next
    t = 0.5 * (a + b)
    # the optimum may sit on a bound
    cand = np.stack([lo, t, hi])
    vals = np.stack([_loglik(x, d, v, mask) for x in cand])
    vals = np.where(np.isnan(vals), -np.inf, vals)
    return cand[np.argmax(vals, axis=0), np.arange(len(t))]


def reml_tau2_batch(deltas, variances, mask=None, tau2_max=None, *, tol=REML_TOL, max_iter=REML_MAX_ITER):
    """REML between-study variance for each row of ``deltas``/``variances``.

    Returns an array of length J. Rows with fewer than two available studies
    raise :class:`InsufficientDataError`.
    """
    d, v, mask = _prepare(deltas, variances, mask)
    m = mask.sum(axis=1)
    if np.any(m < 2):
        raise InsufficientDataError("meta-analysis needs at least 2 studies per marker")
    svar = _sample_var(d, mask)
    if tau2_max is None:
        hi = 10.0 * svar
    else:
        hi = np.broadcast_to(np.asarray(tau2_max, dtype=float), svar.shape).copy()
    has_zero = np.any(mask & (v == 0), axis=1)
    vbar = np.where(mask, v, 0).sum(axis=1) / m

    t = np.maximum(0.0, svar - vbar)
    t = np.where(has_zero & (t == 0), np.maximum(svar, 1e-12), t)
    active = ~has_zero
    done = np.zeros(len(t), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active & ~done)
        if idx.size == 0:
            break
        dd, vv, mm, tt = d[idx], v[idx], mask[idx], t[idx]
        w = _weights(vv, tt, mm)
        sw = w.sum(axis=1)
        mu = (w * dd).sum(axis=1) / sw
        w2 = w * w
        num = (w2 * ((dd - mu[:, None]) ** 2 - vv)).sum(axis=1)
        new = np.maximum(0.0, num / w2.sum(axis=1) + 1.0 / sw)
        ok = np.isfinite(new)
        conv = ok & (np.abs(new - tt) <= tol)
        t[idx] = np.where(ok, new, tt)
        done[idx[conv]] = True
        # non-finite updates go to the fallback
        active[idx[~ok]] = False
    fallback = ~done
    if fallback.any():
        idx = np.flatnonzero(fallback)
        lo = np.zeros(idx.size)
        # zero within-study variance makes t = 0 singular; search just above it
        lo = np.where(has_zero[idx], 1e-12 * np.maximum(hi[idx], 1e-300), lo)
        h = np.maximum(hi[idx], lo)
        est = _golden_max(d[idx], v[idx], mask[idx], lo, h)
        est = np.where(has_zero[idx] & (est <= 2 * lo), 0.0, est)
        t[idx] = est
    return np.maximum(t, 0.0)


def pool_batch(deltas, variances, mask=None, *, method=RE, variance_method=HKSJ, hksj_floor=False, tau2=None):
    """Pool each row; returns a dict of arrays ``mu, tau2, se, q, df, n, weights``.

    ``weights`` are relative (rows sum to one). ``df`` is ``inf`` for the
    conventional variance (normal reference) and ``M - 1`` for HKSJ.
    """
    if method not in (FE, RE):
        raise ValueError(f"method must be FE or RE, got {method!r}")
    if variance_method not in (CONVENTIONAL, HKSJ):
        raise ValueError(f"variance_method must be conventional or HKSJ, got {variance_method!r}")
    if method == FE and variance_method == HKSJ:
        raise ValueError("HKSJ variance is only defined for the random-effects model")
    d, v, mask = _prepare(deltas, variances, mask)
    m = mask.sum(axis=1)
    if np.any(m < 2):
        raise InsufficientDataError("meta-analysis needs at least 2 studies per marker")
    if tau2 is not None:
        t = np.broadcast_to(np.asarray(tau2, float), m.shape).astype(float)
    elif method == FE:
        t = np.zeros(len(m))
    else:
        t = reml_tau2_batch(d, v, mask)

    total = np.where(mask, v + t[:, None], np.inf)
    point = total == 0  # infinitely precise studies dominate in the limit
    has_point = point.any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(mask & ~point, 1.0 / np.where(total == 0, 1.0, total), 0.0)
        sw = w.sum(axis=1)
        mu = (w * d).sum(axis=1) / sw
        mu_point = (point * d).sum(axis=1) / point.sum(axis=1)
        mu = np.where(has_point, mu_point, mu)
        rel = np.where(has_point[:, None], point / point.sum(axis=1, keepdims=True), w / sw[:, None])
        var_conv = np.where(has_point, 0.0, 1.0 / sw)
        q = np.where(has_point, 0.0, (w * (d - mu[:, None]) ** 2).sum(axis=1) / (m - 1))
    if np.any(sw == 0) and not np.all(has_point[sw == 0]):
        raise SingularityError("sum of weights is zero")
    if variance_method == HKSJ:
        qq = np.maximum(q, 1.0) if hksj_floor else q
        se = np.sqrt(qq * var_conv)
        df = (m - 1).astype(float)
    else:
        se = np.sqrt(var_conv)
        df = np.full(len(m), np.inf)
    return {"mu": mu, "tau2": t, "se": se, "q": q, "df": df, "n": m, "weights": rel}


# ------------------------------------------------------------- scalar API


def _as_input(data, variances=None):
    if isinstance(data, MetaInput):
        return data
    return MetaInput("", np.asarray(data, float), np.asarray(variances, float))


def restricted_log_likelihood(tau2, data, variances=None) -> float:
    """Restricted log-likelihood of ``tau2`` (terms constant in ``tau2`` omitted).

    ``data`` is a :class:`MetaInput` or an array of deltas (then pass ``variances``).
    """
    inp = _as_input(data, variances)
    if tau2 < 0:
        raise ValueError("tau2 must be non-negative")
    if np.any(inp.variances + tau2 == 0):
        raise SingularityError("a total variance is zero")
    d, v, mask = _prepare(inp.deltas, inp.variances, None)
    return float(_loglik(np.array([float(tau2)]), d, v, mask)[0])


def estimate_tau2_reml(data, variances=None, tau2_max=None) -> float:
    """REML estimate of the between-study variance (truncated at zero)."""
    inp = _as_input(data, variances)
    return float(reml_tau2_batch(inp.deltas, inp.variances, tau2_max=tau2_max)[0])


def _quantile(p, df):
    return float(stats.norm.ppf(p)) if math.isinf(df) else float(stats.t.ppf(p, df))


def pool_effects(
    data,
    variances=None,
    *,
    method=RE,
    variance_method=HKSJ,
    level=0.95,
    pi_level=0.95,
    hksj_floor=False,
) -> PooledResult:
    """Pool one marker's per-study estimates.

    Returns a :class:`PooledResult` carrying a ``level`` confidence interval and,
    for random effects, a ``pi_level`` prediction interval.
    """
    inp = _as_input(data, variances)
    r = pool_batch(inp.deltas, inp.variances, method=method, variance_method=variance_method, hksj_floor=hksj_floor)
    mu, se, tau2, df = float(r["mu"][0]), float(r["se"][0]), float(r["tau2"][0]), float(r["df"][0])
    m = int(r["n"][0])
    half = _quantile(1 - (1 - level) / 2, df) * se
    if method == RE:
        pi_half = _quantile(1 - (1 - pi_level) / 2, m - 1) * math.sqrt(se * se + tau2)
        pi = (mu - pi_half, mu + pi_half)
    else:
        pi = (math.nan, math.nan)
    return PooledResult(
        mu_hat=mu,
        tau2_hat=tau2,
        se_pooled=se,
        q_scale=float(r["q"][0]),
        ci_low=mu - half,
        ci_high=mu + half,
        pi_low=pi[0],
        pi_high=pi[1],
        method=method,
        variance_method=variance_method,
        df=df,
        n_studies=m,
        level=level,
        pi_level=pi_level,
        weights=r["weights"][0],
        marker_id=inp.marker_id,
    )


def confidence_interval(result: PooledResult, level=0.95) -> tuple[float, float]:
    """``mu +/- Q(1 - (1-level)/2) * se`` with a t(df) or normal quantile."""
    level = check_level(level)
    if result.se_pooled == 0:
        warnings.warn("zero standard error; interval has zero width", DegenerateIntervalWarning, stacklevel=2)
    half = _quantile(1 - (1 - level) / 2, result.df) * result.se_pooled
    return result.mu_hat - half, result.mu_hat + half


def prediction_interval(result: PooledResult, level=0.95) -> tuple[float, float]:
    """Range for the effect in a new study: ``mu +/- t_{M-1} * sqrt(se^2 + tau2)``."""
    if result.method != RE:
        raise ValueError("prediction interval needs a random-effects result")
    level = check_level(level)
    half = _quantile(1 - (1 - level) / 2, result.n_studies - 1) * math.sqrt(
        result.se_pooled**2 + result.tau2_hat
    )
    return result.mu_hat - half, result.mu_hat + half
