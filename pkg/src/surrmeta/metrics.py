"""Agreement between per-study treatment effects on the endpoint and on a marker.

Each statistic has a batch form that works along the last axis, which keeps the
bootstrap vectorised.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .validation import InsufficientDataError, check_level, check_random_state


class UndefinedStatisticError(ValueError):
    """The statistic has a zero denominator on this sample."""


class DegenerateBootstrapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EffectPairs:
    u_y: np.ndarray
    u_s: np.ndarray
    n_per_study: np.ndarray = field(default=None)

    def __post_init__(self):
        uy = np.asarray(self.u_y, dtype=float)
        us = np.asarray(self.u_s, dtype=float)
        if uy.ndim != 1 or uy.shape != us.shape:
            raise ValueError("u_y and u_s must be 1-D arrays of equal length")
        n = np.ones_like(uy) if self.n_per_study is None else np.asarray(self.n_per_study, dtype=float)
        if n.shape != uy.shape:
            raise ValueError("n_per_study must match the effect vectors")
        if np.any(n <= 0):
            raise ValueError("study sizes must be positive")
        object.__setattr__(self, "u_y", uy)
        object.__setattr__(self, "u_s", us)
        object.__setattr__(self, "n_per_study", n)

    def __len__(self):
        return len(self.u_y)


# ------------------------------------------------------------ batch forms


def ccc_batch(uy, us, n=None):
    """Lin's concordance correlation with population (divisor M) moments."""
    uy, us = np.asarray(uy, float), np.asarray(us, float)
    mx, my = uy.mean(axis=-1), us.mean(axis=-1)
    dx, dy = uy - mx[..., None], us - my[..., None]
    vx, vy = (dx * dx).mean(axis=-1), (dy * dy).mean(axis=-1)
    cov = (dx * dy).mean(axis=-1)
    den = vx + vy + (mx - my) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den == 0, 1.0, 2 * cov / np.where(den == 0, 1.0, den))


def icc21_batch(uy, us, n=None):
    """ICC(2,1): two-way random effects, absolute agreement, single measurement."""
    uy, us = np.asarray(uy, float), np.asarray(us, float)
    m = uy.shape[-1]
    row = (us + uy) / 2
    grand = row.mean(axis=-1)
    mean_s, mean_y = us.mean(axis=-1), uy.mean(axis=-1)
    ms_r = 2.0 / (m - 1) * ((row - grand[..., None]) ** 2).sum(axis=-1)
    ms_c = m * ((mean_s - grand) ** 2 + (mean_y - grand) ** 2)
    res_s = us - row - mean_s[..., None] + grand[..., None]
    res_y = uy - row - mean_y[..., None] + grand[..., None]
    ms_e = ((res_s**2) + (res_y**2)).sum(axis=-1) / (m - 1)
    den = ms_r + ms_e + 2.0 / m * (ms_c - ms_e)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den == 0, np.nan, (ms_r - ms_e) / np.where(den == 0, 1.0, den))


def r2_wls_batch(uy, us, n=None):
    """R^2 of the sample-size weighted regression of ``u_y`` on ``u_s``."""
    uy, us = np.asarray(uy, float), np.asarray(us, float)
    w = np.ones_like(uy) if n is None else np.broadcast_to(np.asarray(n, float), uy.shape)
    sw = w.sum(axis=-1)
    mx = (w * us).sum(axis=-1) / sw
    my = (w * uy).sum(axis=-1) / sw
    dx, dy = us - mx[..., None], uy - my[..., None]
    sxx = (w * dx * dx).sum(axis=-1)
    syy = (w * dy * dy).sum(axis=-1)
    sxy = (w * dx * dy).sum(axis=-1)
    den = sxx * syy
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(den > 0, sxy * sxy / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(r2, 0.0, 1.0)


STATISTICS = {"ccc": ccc_batch, "icc21": icc21_batch, "r2_trial_wls": r2_wls_batch}


# ------------------------------------------------------------- scalar API


def _pairs(pairs, u_s=None, n=None):
    if isinstance(pairs, EffectPairs):
        return pairs
    return EffectPairs(pairs, u_s, n)


def ccc(pairs, u_s=None) -> float:
    """Concordance correlation coefficient between ``u_y`` and ``u_s``.

    Both vectors constant: 1 if equal, 0 otherwise (with a warning).
    """
    p = _pairs(pairs, u_s)
    if len(p) < 2:
        raise InsufficientDataError("CCC needs at least 2 studies")
    const_y, const_s = np.ptp(p.u_y) == 0, np.ptp(p.u_s) == 0
    if const_y and const_s:
        warnings.warn("both effect vectors are constant; CCC set by convention", RuntimeWarning, stacklevel=2)
        return 1.0 if p.u_y[0] == p.u_s[0] else 0.0
    return float(ccc_batch(p.u_y, p.u_s))


def icc21(pairs, u_s=None) -> float:
    """Intraclass correlation ICC(2,1) from the two-way mean squares."""
    p = _pairs(pairs, u_s)
    if len(p) < 2:
        raise InsufficientDataError("ICC needs at least 2 studies")
    val = float(icc21_batch(p.u_y, p.u_s))
    if np.isnan(val):
        raise UndefinedStatisticError("ICC(2,1) denominator is zero (all values identical)")
    return val


def icc_mean_squares(pairs, u_s=None) -> dict:
    """The mean squares ``MS_R``, ``MS_C``, ``MS_E`` behind :func:`icc21`."""
    p = _pairs(pairs, u_s)
    m = len(p)
    row = (p.u_s + p.u_y) / 2
    grand = row.mean()
    ms_r = 2 / (m - 1) * np.sum((row - grand) ** 2)
    ms_c = m * ((p.u_s.mean() - grand) ** 2 + (p.u_y.mean() - grand) ** 2)
    ms_e = np.sum((p.u_s - row - p.u_s.mean() + grand) ** 2 + (p.u_y - row - p.u_y.mean() + grand) ** 2) / (m - 1)
    return {"MS_R": float(ms_r), "MS_C": float(ms_c), "MS_E": float(ms_e)}


def r2_trial_wls(pairs, u_s=None, n=None) -> float:
    """Trial-level R^2: weighted least squares of ``u_y`` on ``u_s`` with weights ``n``."""
    p = _pairs(pairs, u_s, n)
    if len(p) < 3:
        raise InsufficientDataError("R^2_trial needs at least 3 studies")
    if np.ptp(p.u_s) == 0:
        raise UndefinedStatisticError("u_s is constant; regression slope undefined")
    val = float(r2_wls_batch(p.u_y, p.u_s, p.n_per_study))
    if np.isnan(val):
        raise UndefinedStatisticError("u_y is constant; R^2 undefined")
    return val


def wls_coefficients(pairs, u_s=None, n=None) -> tuple[float, float]:
    """Intercept and slope of the weighted fit ``u_y = k0 + k1 * u_s``."""
    p = _pairs(pairs, u_s, n)
    w = p.n_per_study
    mx = np.average(p.u_s, weights=w)
    my = np.average(p.u_y, weights=w)
    k1 = np.sum(w * (p.u_s - mx) * (p.u_y - my)) / np.sum(w * (p.u_s - mx) ** 2)
    return float(my - k1 * mx), float(k1)


# -------------------------------------------------------------- bootstrap


class BootstrapError(RuntimeError):
    pass


def bca_bootstrap_ci(statistic, pairs, B=2000, level=0.95, seed=0, *, max_failure=0.10):
    """Bias-corrected and accelerated bootstrap interval, resampling studies.

    Parameters
    ----------
    statistic : {"ccc", "icc21", "r2_trial_wls"}
    pairs : EffectPairs
    B : int
        Bootstrap replicates (>= 200).
    level : float
    seed : int or Generator

    Returns
    -------
    (low, high) : tuple of float
    """
    if B < 200:
        raise ValueError("B must be at least 200")
    level = check_level(level)
    fn = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    p = pairs if isinstance(pairs, EffectPairs) else EffectPairs(*pairs)
    m = len(p)
    theta = float(fn(p.u_y, p.u_s, p.n_per_study))
    if np.isnan(theta):
        raise UndefinedStatisticError("statistic undefined on the original sample")

    rng = check_random_state(seed)
    idx = rng.integers(0, m, size=(B, m))
    reps = np.asarray(fn(p.u_y[idx], p.u_s[idx], p.n_per_study[idx]), dtype=float)
    bad = np.isnan(reps)
    if bad.mean() > max_failure:
        raise BootstrapError(f"statistic undefined on {bad.mean():.1%} of bootstrap replicates")
    reps = reps[~bad]
    if np.ptp(reps) == 0:
        warnings.warn("bootstrap distribution is degenerate", DegenerateBootstrapWarning, stacklevel=2)
        return float(reps[0]), float(reps[0])

    prop = np.mean(reps < theta)
    prop = np.clip(prop, 0.5 / reps.size, 1 - 0.5 / reps.size)
    z0 = stats.norm.ppf(prop)

    loo = np.array([np.delete(np.arange(m), i) for i in range(m)])
    jack = np.asarray(fn(p.u_y[loo], p.u_s[loo], p.n_per_study[loo]), dtype=float)
    jack = jack[~np.isnan(jack)]
    diff = jack.mean() - jack
    den = 6.0 * np.sum(diff**2) ** 1.5
    accel = float(np.sum(diff**3) / den) if den > 0 else 0.0

    z = stats.norm.ppf([(1 - level) / 2, (1 + level) / 2])
    adj = stats.norm.cdf(z0 + (z0 + z) / (1 - accel * (z0 + z)))
    low, high = np.quantile(reps, adj)
    return float(low), float(high)
