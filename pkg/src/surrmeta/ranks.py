"""Within-study rank-based treatment effects and surrogacy bias.

``U`` is the probability that a treated (post-treatment) value exceeds a control
(pre-treatment) value, ties counting one half. The surrogacy bias of a marker is
``delta = U_Y - U_S``.

All comparison counts are accumulated as integers (twice the comparison
function, which is 0, 1 or 2), so point estimates and variances are formed by
a single correctly rounded division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .data import PAIRED, StudyDataset
from .validation import InsufficientDataError, check_level, check_same_length, check_vector


@dataclass(frozen=True)
class WithinStudyEstimate:
    study_id: str
    marker_id: str
    u_y: float
    u_s: float
    delta: float
    var_delta: float
    se_u_y: float
    n_effective: int

    @property
    def se_delta(self) -> float:
        return math.sqrt(self.var_delta)


@dataclass(frozen=True)
class DominanceCheck:
    max_violation: float
    passed: bool


def g_compare(x, y):
    """1 if ``x > y``, 1/2 if equal, 0 if ``x < y`` (elementwise)."""
    return 0.5 * (np.sign(np.subtract(x, y, dtype=float)) + 1.0)


def _g2(x, y):
    # twice g_compare, exact small integers stored as float
    return np.sign(np.subtract(x, y, dtype=float)) + 1.0


# ------------------------------------------------------------------ paired


def paired_effects(y0, y1, s0, s1) -> pd.DataFrame:
    """Vectorised paired estimates for each column of ``s0``/``s1``.

    ``y0``, ``y1`` have shape (N,), ``s0``, ``s1`` shape (N, J); NaN entries drop
    the subject from the affected marker only. Markers with fewer than two
    complete subjects get NaN estimates.
    """
    y0, y1 = np.asarray(y0, float), np.asarray(y1, float)
    s0, s1 = np.atleast_2d(np.asarray(s0, float).T).T, np.atleast_2d(np.asarray(s1, float).T).T
    ok = np.isfinite(y0)[:, None] & np.isfinite(y1)[:, None] & np.isfinite(s0) & np.isfinite(s1)
    n = ok.sum(axis=0)
    gy = np.where(ok, _g2(y1, y0)[:, None], 0.0)
    gs = np.where(ok, _g2(s1, s0), 0.0)
    e = gy - gs
    # integer-valued sums stay exact in float64 while 4*N^3 < 2**53
    if n.max(initial=0) >= 100_000:
        raise ValueError("paired estimation supports at most 99,999 subjects per study")
    nf = n.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_y = np.where(n >= 2, gy.sum(axis=0) / (2 * nf), np.nan)
        u_s = np.where(n >= 2, gs.sum(axis=0) / (2 * nf), np.nan)
        den = 4 * nf * nf * (nf - 1)
        var_delta = np.where(n >= 2, (nf * (e * e).sum(axis=0) - e.sum(axis=0) ** 2) / den, np.nan)
        var_uy = np.where(n >= 2, (nf * (gy * gy).sum(axis=0) - gy.sum(axis=0) ** 2) / den, np.nan)
    return pd.DataFrame(
        {
            "u_y": u_y,
            "u_s": u_s,
            "delta": u_y - u_s,
            "var_delta": var_delta,
            "se_u_y": np.sqrt(var_uy),
            "n": n.astype(int),
        }
    )


def estimate_paired(y0, y1, s0, s1, *, study_id="", marker_id="") -> WithinStudyEstimate:
    """Paired (pre/post) estimate for one marker.

    The variance of ``delta`` is the sample variance (divisor N-1) of the
    per-subject differences ``G(y1, y0) - G(s1, s0)`` divided by N.
    """
    y0, y1, s0, s1 = (check_vector(v, n) for v, n in zip((y0, y1, s0, s1), ("y0", "y1", "s0", "s1")))
    check_same_length(y0=y0, y1=y1, s0=s0, s1=s1)
    if len(y0) < 2:
        raise InsufficientDataError("paired estimation needs at least 2 complete pairs")
    row = paired_effects(y0, y1, s0[:, None], s1[:, None]).iloc[0]
    return _to_estimate(row, study_id, marker_id)


# ----------------------------------------------------------------- two-arm


def two_arm_effects(y_t, s_t, y_c, s_c) -> pd.DataFrame:
    """Vectorised two-arm estimates for each column of ``s_t``/``s_c``.

    Variance uses the two-sample U-statistic projection: with
    ``p_i = mean_l[G(y_t_i, y_c_l) - G(s_t_i, s_c_l)]`` and ``q_l`` the analogous
    per-control mean, ``var_delta = Var(p)/N1 + Var(q)/N0``.
    """
    y_t, y_c = np.asarray(y_t, float), np.asarray(y_c, float)
    s_t = np.asarray(s_t, float).reshape(len(y_t), -1)
    s_c = np.asarray(s_c, float).reshape(len(y_c), -1)
    j = s_t.shape[1]
    cols = {k: np.full(j, np.nan) for k in ("u_y", "u_s", "var_delta", "var_uy")}
    n_eff = np.zeros(j, dtype=int)
    gy_full = _g2(y_t[:, None], y_c[None, :])
    for k in range(j):
        ot = np.isfinite(y_t) & np.isfinite(s_t[:, k])
        oc = np.isfinite(y_c) & np.isfinite(s_c[:, k])
        n1, n0 = int(ot.sum()), int(oc.sum())
        n_eff[k] = n1 + n0
        if n1 < 2 or n0 < 2:
            continue
        gy = gy_full[np.ix_(ot, oc)]
        gs = _g2(s_t[ot, k][:, None], s_c[oc, k][None, :])
        cols["u_y"][k] = int(gy.sum()) / (2 * n1 * n0)
        cols["u_s"][k] = int(gs.sum()) / (2 * n1 * n0)
        cols["var_delta"][k] = _projection_var(gy - gs, n1, n0)
        cols["var_uy"][k] = _projection_var(gy, n1, n0)
    return pd.DataFrame(
        {
            "u_y": cols["u_y"],
            "u_s": cols["u_s"],
            "delta": cols["u_y"] - cols["u_s"],
            "var_delta": cols["var_delta"],
            "se_u_y": np.sqrt(cols["var_uy"]),
            "n": n_eff,
        }
    )


def _projection_var(h2, n1, n0):
    # h2: (n1, n0) integer matrix of doubled kernel values
    e = [int(v) for v in h2.sum(axis=1)]  # 2*n0*p_i
    f = [int(v) for v in h2.sum(axis=0)]  # 2*n1*q_l
    a = n1 * sum(v * v for v in e) - sum(e) ** 2
    b = n0 * sum(v * v for v in f) - sum(f) ** 2
    return (a * (n0 - 1) + b * (n1 - 1)) / (4 * n0 * n0 * n1 * n1 * (n1 - 1) * (n0 - 1))


def estimate_two_arm(y_t, s_t, y_c, s_c, *, study_id="", marker_id="") -> WithinStudyEstimate:
    """Treated-versus-control estimate for one marker."""
    y_t, s_t = check_vector(y_t, "y_t"), check_vector(s_t, "s_t")
    y_c, s_c = check_vector(y_c, "y_c"), check_vector(s_c, "s_c")
    check_same_length(y_t=y_t, s_t=s_t)
    check_same_length(y_c=y_c, s_c=s_c)
    if len(y_t) < 2 or len(y_c) < 2:
        raise InsufficientDataError("each arm needs at least 2 subjects")
    row = two_arm_effects(y_t, s_t[:, None], y_c, s_c[:, None]).iloc[0]
    return _to_estimate(row, study_id, marker_id)


def jackknife_var_two_arm(y_t, s_t, y_c, s_c) -> float:
    """Two-sample delete-one jackknife variance of ``delta`` (cross-check only)."""
    y_t, s_t, y_c, s_c = (np.asarray(v, float) for v in (y_t, s_t, y_c, s_c))
    h = g_compare(y_t[:, None], y_c[None, :]) - g_compare(s_t[:, None], s_c[None, :])
    n1, n0 = h.shape
    tot = h.sum()
    loo_t = (tot - h.sum(axis=1)) / ((n1 - 1) * n0)
    loo_c = (tot - h.sum(axis=0)) / (n1 * (n0 - 1))
    return (n1 - 1) / n1 * np.sum((loo_t - loo_t.mean()) ** 2) + (n0 - 1) / n0 * np.sum(
        (loo_c - loo_c.mean()) ** 2
    )


def _to_estimate(row, study_id, marker_id) -> WithinStudyEstimate:
    return WithinStudyEstimate(
        study_id=study_id,
        marker_id=marker_id,
        u_y=float(row["u_y"]),
        u_s=float(row["u_s"]),
        delta=float(row["delta"]),
        var_delta=float(row["var_delta"]),
        se_u_y=float(row["se_u_y"]),
        n_effective=int(row["n"]),
    )


# ------------------------------------------------------------ whole studies


def study_effects(study: StudyDataset, markers=None) -> pd.DataFrame:
    """Per-marker estimates for one study as a tidy frame.

    Columns: ``study, marker, u_y, u_s, delta, var_delta, se_u_y, n``.
    """
    if markers is None:
        cols = np.arange(study.n_markers)
        names = list(study.markers)
    else:
        names = list(markers)
        cols = np.array([study.marker_index(m) for m in names], dtype=int)
    if study.design == PAIRED:
        _, y0, y1, s0, s1 = study.paired_arrays()
        frame = paired_effects(y0, y1, s0[:, cols], s1[:, cols])
    else:
        y_t, s_t, y_c, s_c = study.arm_arrays()
        frame = two_arm_effects(y_t, s_t[:, cols], y_c, s_c[:, cols])
    frame.insert(0, "marker", names)
    frame.insert(0, "study", study.study_id)
    return frame


def endpoint_effect(study: StudyDataset) -> tuple[float, float, int]:
    """``(u_y, se_u_y, n)`` for the primary endpoint alone, using every complete subject."""
    if study.design == PAIRED:
        _, y0, y1, _, _ = study.paired_arrays()
        ok = np.isfinite(y0) & np.isfinite(y1)
        y0, y1 = y0[ok], y1[ok]
        if len(y0) < 2:
            raise InsufficientDataError(f"study {study.study_id}: fewer than 2 complete pairs")
        row = paired_effects(y0, y1, y0[:, None], y1[:, None]).iloc[0]
    else:
        y_t, _, y_c, _ = study.arm_arrays()
        y_t, y_c = y_t[np.isfinite(y_t)], y_c[np.isfinite(y_c)]
        if len(y_t) < 2 or len(y_c) < 2:
            raise InsufficientDataError(f"study {study.study_id}: an arm has fewer than 2 subjects")
        row = two_arm_effects(y_t, y_t[:, None], y_c, y_c[:, None]).iloc[0]
    return float(row["u_y"]), float(row["se_u_y"]), int(row["n"])


# ---------------------------------------------------------------- margins


def select_epsilon_power(se_u_y, alpha=0.05, power=0.80) -> float:
    """Equivalence bound from a target power to detect a treatment effect on Y.

    Per study, ``eps_m = (z_{1-alpha} + z_power) * se(U_Y)_m``: the smallest shift
    in ``U_Y`` detectable by a one-sided level-``alpha`` test with the requested
    power under a normal approximation. Returns the unweighted mean over studies.

    ``se_u_y`` may be a sequence of floats or of :class:`WithinStudyEstimate`.
    """
    alpha = check_level(alpha, "alpha")
    power = check_level(power, "power")
    se = np.array([getattr(v, "se_u_y", v) for v in np.atleast_1d(np.asarray(se_u_y, dtype=object))], dtype=float)
    if se.size == 0:
        raise InsufficientDataError("no studies supplied")
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        raise ValueError("every study needs a positive finite se(U_Y) for the power calculation")
    mult = stats.norm.ppf(1 - alpha) + stats.norm.ppf(power)
    return float(np.mean(mult * se))


# -------------------------------------------------------------- diagnostics


def check_dominance_c2(s_t, s_c, tol: float = 0.0) -> DominanceCheck:
    """Empirical check that treatment does not lower the marker distribution.

    Reports the largest excess of the treated ECDF over the control ECDF on the
    pooled support; zero means first-order dominance holds in the sample.
    """
    s_t = check_vector(s_t, "s_t")
    s_c = check_vector(s_c, "s_c")
    grid = np.union1d(s_t, s_c)
    f_t = np.searchsorted(np.sort(s_t), grid, side="right") / len(s_t)
    f_c = np.searchsorted(np.sort(s_c), grid, side="right") / len(s_c)
    worst = max(0.0, float(np.max(f_t - f_c)))
    return DominanceCheck(max_violation=worst, passed=worst <= tol)
