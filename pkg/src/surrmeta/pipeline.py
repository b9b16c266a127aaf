"""Marker screening across studies: within-study estimates, pooling, TOST and BH."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import meta
from .data import StudyDataset
from .equivalence import bh_adjust, tost_p_values
from .ranks import endpoint_effect, select_epsilon_power, study_effects
from .signature import SignatureSpec, empty_signature, signature_weights, standardize_within_study

logger = logging.getLogger(__name__)

META_CHOICES = {
    "re-hksj": (meta.RE, meta.HKSJ),
    "re-conv": (meta.RE, meta.CONVENTIONAL),
    "fe": (meta.FE, meta.CONVENTIONAL),
}


def parse_meta(name: str) -> tuple[str, str]:
    try:
        return META_CHOICES[name.lower()]
    except KeyError:
        raise ValueError(f"meta must be one of {sorted(META_CHOICES)}, got {name!r}") from None


@dataclass
class ScreenResult:
    table: pd.DataFrame
    effects: pd.DataFrame
    signature: SignatureSpec
    epsilon: float
    alpha: float

    @property
    def selected(self) -> list:
        return list(self.signature.members)


def all_study_effects(studies: Sequence[StudyDataset], markers=None, threads: int = 1) -> pd.DataFrame:
    """Long table of per-(study, marker) estimates; study order is preserved."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(lambda s: study_effects(s, markers), studies))
    else:
        frames = [study_effects(s, markers) for s in studies]
    return pd.concat(frames, ignore_index=True)


def power_epsilon(studies: Sequence[StudyDataset], alpha=0.05, power=0.80) -> float:
    """Mean over studies of the power-based bound computed from ``se(U_Y)``."""
    return select_epsilon_power([endpoint_effect(s)[1] for s in studies], alpha, power)


def resolve_epsilon(studies, epsilon) -> float:
    """``epsilon`` is a positive float or ``("power", alpha, power)``."""
    if isinstance(epsilon, (tuple, list)):
        kind, a, pw = epsilon
        if kind != "power":
            raise ValueError(f"unknown epsilon policy {kind!r}")
        return power_epsilon(studies, a, pw)
    eps = float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    return eps


def pool_markers(effects: pd.DataFrame, *, method=meta.RE, variance_method=meta.HKSJ, alpha=0.05, pi_level=0.95, hksj_floor=False):
    """Pool every marker of a long effects table. Returns ``(table, delta, var, study_ids)``.

    Markers present in fewer than two studies are dropped with a warning.
    """
    delta = effects.pivot(index="marker", columns="study", values="delta")
    var = effects.pivot(index="marker", columns="study", values="var_delta")
    order = list(dict.fromkeys(effects["marker"]))
    studies = list(dict.fromkeys(effects["study"]))
    delta, var = delta.loc[order, studies], var.loc[order, studies]
    mask = np.isfinite(delta.to_numpy()) & np.isfinite(var.to_numpy())
    enough = mask.sum(axis=1) >= 2
    if not enough.all():
        dropped = [m for m, ok in zip(order, enough) if not ok]
        logger.warning("%d marker(s) estimable in fewer than 2 studies were dropped: %s", len(dropped), ", ".join(dropped[:10]))
    delta, var, mask = delta[enough], var[enough], mask[enough]
    if len(delta) == 0:
        raise ValueError("no marker is estimable in at least 2 studies")
    r = meta.pool_batch(delta.to_numpy(), var.to_numpy(), mask, method=method, variance_method=variance_method, hksj_floor=hksj_floor)
    mu, se, df, m = r["mu"], r["se"], r["df"], r["n"]
    level = 1 - 2 * alpha
    qci = np.where(np.isinf(df), stats.norm.ppf(1 - (1 - level) / 2), stats.t.ppf(1 - (1 - level) / 2, np.where(np.isinf(df), 1, df)))
    if method == meta.RE:
        half_pi = stats.t.ppf(1 - (1 - pi_level) / 2, m - 1) * np.sqrt(se**2 + r["tau2"])
    else:
        half_pi = np.full(len(mu), np.nan)
    table = pd.DataFrame(
        {
            "marker": delta.index.to_numpy(),
            "mu": mu,
            "tau2": r["tau2"],
            "se": se,
            "q": r["q"],
            "df": df,
            "n_studies": m,
            "ci_low": mu - qci * se,
            "ci_high": mu + qci * se,
            "pi_low": mu - half_pi,
            "pi_high": mu + half_pi,
        }
    )
    weights = pd.DataFrame(r["weights"], index=delta.index, columns=delta.columns)
    return table, delta, var, weights


def screen(
    studies: Sequence[StudyDataset],
    epsilon=0.1,
    alpha: float = 0.05,
    *,
    meta_method: str = "re-hksj",
    markers=None,
    threads: int = 1,
    hksj_floor: bool = False,
) -> ScreenResult:
    """Run within-study estimation, pooling, TOST and BH; build the signature.

    Returns the marker-level table (sorted by raw TOST p-value), the long effects
    table and the :class:`SignatureSpec` of the markers with adjusted p < alpha.
    """
    if len(studies) < 2:
        raise ValueError("screening needs at least 2 studies for meta-analysis")
    ids = [s.study_id for s in studies]
    if len(set(ids)) != len(ids):
        raise ValueError("study ids must be unique")
    method, variance_method = parse_meta(meta_method)
    eps = resolve_epsilon(studies, epsilon)
    effects = all_study_effects(studies, markers, threads)
    table, _, var, weights = pool_markers(effects, method=method, variance_method=variance_method, alpha=alpha, hksj_floor=hksj_floor)
    lo, up, p = tost_p_values(table["mu"].to_numpy(), table["se"].to_numpy(), table["df"].to_numpy(), eps)
    table["p_lower"], table["p_upper"], table["p"] = lo, up, p
    table["p_adjusted"] = bh_adjust(p)
    table["significant"] = table["p_adjusted"] < alpha
    table = table.sort_values(["p", "marker"], kind="mergesort").reset_index(drop=True)

    chosen = table[table["significant"]].sort_values("marker")
    if chosen.empty:
        logger.warning("no marker passed screening; the signature is empty")
        spec = empty_signature(eps)
    else:
        members = list(chosen["marker"])
        sig2 = {m: var.loc[m].dropna().to_numpy() for m in members}
        spec = signature_weights(
            members,
            dict(zip(chosen["marker"], chosen["mu"])),
            eps,
            sig2,
            dict(zip(chosen["marker"], chosen["tau2"])),
            on_zero_variance="limit",
        )
        for s in studies:
            try:
                _, params = standardize_within_study(s, members)
            except ValueError as exc:
                logger.warning("standardisation parameters unavailable for study %s: %s", s.study_id, exc)
                continue
            spec.standardization[s.study_id] = params
    effects = effects.merge(
        weights.stack().rename("weight").reset_index(), on=["marker", "study"], how="left"
    )
    return ScreenResult(table=table, effects=effects, signature=spec, epsilon=eps, alpha=alpha)


def forest_table(result: ScreenResult, marker: str) -> pd.DataFrame:
    """Per-study rows plus pooled and prediction-interval rows for one marker."""
    eff = result.effects[result.effects["marker"] == marker].copy()
    row = result.table.set_index("marker").loc[marker]
    z = stats.norm.ppf(1 - result.alpha)
    se = np.sqrt(eff["var_delta"].to_numpy())
    out = pd.DataFrame(
        {
            "label": eff["study"].to_numpy(),
            "estimate": eff["delta"].to_numpy(),
            "se": se,
            "ci_low": eff["delta"].to_numpy() - z * se,
            "ci_high": eff["delta"].to_numpy() + z * se,
            "weight": eff["weight"].to_numpy(),
            "n": eff["n"].to_numpy(),
        }
    )
    extra = pd.DataFrame(
        [
            {"label": "pooled", "estimate": row["mu"], "se": row["se"], "ci_low": row["ci_low"], "ci_high": row["ci_high"],
             "weight": 1.0, "n": int(eff["n"].sum())},
            {"label": "prediction", "estimate": row["mu"], "se": math.sqrt(row["se"] ** 2 + row["tau2"]),
             "ci_low": row["pi_low"], "ci_high": row["pi_high"], "weight": math.nan, "n": int(eff["n"].sum())},
        ]
    )
    return pd.concat([out, extra], ignore_index=True)
