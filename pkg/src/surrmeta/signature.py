"""Composite surrogate signature: weights, within-study standardisation, evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import meta
from .data import StudyDataset
from .equivalence import tost_p
from .metrics import EffectPairs, UndefinedStatisticError, bca_bootstrap_ci, ccc, icc21, r2_trial_wls
from .ranks import study_effects
from .validation import InsufficientDataError, SingularityError, check_positive

logger = logging.getLogger(__name__)

SIGNATURE = "signature"


class ZeroVarianceError(ValueError):
    """A member marker is constant within a study and cannot be standardised."""


@dataclass
class SignatureSpec:
    members: tuple
    lambdas: tuple
    a_component: tuple
    b_component: tuple
    epsilon_used: float
    standardization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.members = tuple(self.members)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.a_component = tuple(float(x) for x in self.a_component)
        self.b_component = tuple(float(x) for x in self.b_component)
        if not (len(self.members) == len(self.lambdas) == len(self.a_component) == len(self.b_component)):
            raise ValueError("signature fields must all have one entry per member")
        if self.lambdas:
            if not math.isclose(max(self.lambdas), 1.0) or min(self.lambdas) <= 0:
                raise ValueError("weights must be positive with maximum 1")

    @property
    def is_empty(self) -> bool:
        return not self.members

    def weight(self, marker) -> float:
        return self.lambdas[self.members.index(marker)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["members"] = list(self.members)
        # infinite precision is written as null to keep the file strict JSON
        d["b_component"] = [x if math.isfinite(x) else None for x in self.b_component]
        d["standardization"] = {
            study: {m: [float(mu), float(sd)] for m, (mu, sd) in params.items()}
            for study, params in self.standardization.items()
        }
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "SignatureSpec":
        std = {s: {m: tuple(v) for m, v in p.items()} for s, p in d.get("standardization", {}).items()}
        return cls(
            members=tuple(d["members"]),
            lambdas=tuple(d["lambdas"]),
            a_component=tuple(d["a_component"]),
            b_component=tuple(math.inf if x is None else x for x in d["b_component"]),
            epsilon_used=float(d["epsilon_used"]),
            standardization=std,
        )

    @classmethod
    def from_json(cls, path) -> "SignatureSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _aligned(values, members, name):
    if isinstance(values, Mapping):
        try:
            return [values[m] for m in members]
        except KeyError as exc:
            raise KeyError(f"{name} has no entry for marker {exc.args[0]!r}") from None
    values = list(values)
    if len(values) != len(members):
        raise ValueError(f"{name} must have one entry per member")
    return values


def signature_weights(members, mu_hats, epsilon, sigma2_by_study, tau2_by_marker, *, on_zero_variance="raise") -> SignatureSpec:
    """Weights combining closeness to zero bias and precision.

    ``a_j = (eps - |mu_j|)/eps``, ``b_j = sum_m 1/(sigma2_mj + tau2_j)`` and
    ``lambda_j = a_j b_j / max_k a_k b_k``. Mappings are keyed by marker id;
    sequences must be aligned with ``members``.

    A zero total variance makes ``b_j`` infinite. ``on_zero_variance="raise"``
    raises :class:`SingularityError`; ``"limit"`` takes the limit of the weights
    as those variances shrink to zero (see below).
    """
    if on_zero_variance not in ("raise", "limit"):
        raise ValueError("on_zero_variance must be 'raise' or 'limit'")
    members = list(members)
    if not members:
        raise ValueError("no markers to compose")
    epsilon = check_positive(epsilon, "epsilon")
    mus = np.asarray(_aligned(mu_hats, members, "mu_hats"), dtype=float)
    tau2 = np.asarray(_aligned(tau2_by_marker, members, "tau2_by_marker"), dtype=float)
    sig2 = _aligned(sigma2_by_study, members, "sigma2_by_study")
    if np.any(np.abs(mus) >= epsilon):
        bad = members[int(np.argmax(np.abs(mus) >= epsilon))]
        raise ValueError(f"marker {bad!r} has |mu| >= epsilon and cannot enter the signature")
    a = (epsilon - np.abs(mus)) / epsilon
    b = np.empty(len(members))
    for k, s2 in enumerate(sig2):
        total = np.asarray(s2, dtype=float) + tau2[k]
        if np.any(total == 0) and on_zero_variance == "raise":
            raise SingularityError(f"marker {members[k]!r} has a zero total variance")
        b[k] = np.inf if np.any(total == 0) else np.sum(1.0 / total)
    if np.isinf(b).any():
        # limit of a*b/max(a*b) as the zero variances shrink to 0: only the
        # infinitely precise markers keep a positive weight, proportional to a
        keep = np.isinf(b)
        dropped = [m for m, k in zip(members, keep) if not k]
        if dropped:
            logger.warning("zero total variance for %s; finite-precision members get weight 0 and are dropped: %s",
                           [m for m, k in zip(members, keep) if k], dropped)
        members = [m for m, k in zip(members, keep) if k]
        a, b = a[keep], b[keep]
        lam = a / a.max()
    else:
        ab = a * b
        lam = ab / ab.max()
    return SignatureSpec(tuple(members), tuple(lam), tuple(a), tuple(b), epsilon)


def empty_signature(epsilon) -> SignatureSpec:
    return SignatureSpec((), (), (), (), float(epsilon))


def standardize_within_study(data: StudyDataset, members) -> tuple[StudyDataset, dict]:
    """Centre and scale each member to mean 0, SD 1 over all of the study's records.

    Both timepoints (or arms) are pooled; masked values are ignored. Returns the
    transformed study and ``{marker: (mean, sd)}``.
    """
    s = data.s.copy()
    params = {}
    for m in members:
        k = data.marker_index(m)
        col = s[:, k]
        obs = col[np.isfinite(col)]
        sd = float(np.std(obs, ddof=1)) if obs.size > 1 else 0.0
        if not sd > 0:
            raise ZeroVarianceError(f"marker {m!r} has zero standard deviation in study {data.study_id}")
        mu = float(np.mean(obs))
        s[:, k] = (col - mu) / sd
        params[m] = (mu, sd)
    return data.with_markers(data.markers, s), params


def compose_signature(data: StudyDataset, spec: SignatureSpec) -> StudyDataset:
    """Append ``sum_j lambda_j * S_j`` as a marker named ``"signature"``.

    ``data`` should already be standardised; a record with any member masked gets
    a masked signature value.
    """
    if spec.is_empty:
        raise ValueError("signature has no members")
    missing = [m for m in spec.members if m not in data.markers]
    if missing:
        raise KeyError(f"signature members absent from study {data.study_id}: {missing}")
    cols = [data.marker_index(m) for m in spec.members]
    values = data.s[:, cols] @ np.asarray(spec.lambdas)
    if SIGNATURE in data.markers:
        s = data.s.copy()
        s[:, data.marker_index(SIGNATURE)] = values
        return data.with_markers(data.markers, s)
    return data.add_marker(SIGNATURE, values)


def signature_study(data: StudyDataset, spec: SignatureSpec) -> StudyDataset:
    """Standardise members within ``data`` and append the composite."""
    std, _ = standardize_within_study(data, spec.members)
    return compose_signature(std, spec)


@dataclass
class SignatureEvaluation:
    per_study: pd.DataFrame
    pooled: meta.PooledResult
    p_lower: float
    p_upper: float
    p_tost: float
    epsilon: float
    alpha: float
    significant: bool
    metrics: pd.DataFrame
    skipped: list = field(default_factory=list)


def evaluate_signature(
    holdout: Sequence[StudyDataset],
    spec: SignatureSpec,
    epsilon_eval: float,
    alpha: float = 0.05,
    *,
    method: str = meta.RE,
    variance_method: str = meta.HKSJ,
    min_n: int = 2,
    n_boot: int = 2000,
    seed=0,
) -> SignatureEvaluation:
    """Estimate, pool, test and score the composite on held-out studies.

    Standardisation is re-estimated on each held-out study. Studies that cannot
    be estimated (too few subjects, constant member) are skipped with a warning.
    ``n_boot=0`` skips the bootstrap intervals.
    """
    epsilon_eval = check_positive(epsilon_eval, "epsilon_eval")
    frames, skipped = [], []
    for study in holdout:
        if study.n_complete() < min_n:
            logger.warning("skipping study %s: %d complete subjects < %d", study.study_id, study.n_complete(), min_n)
            skipped.append(study.study_id)
            continue
        try:
            composite = signature_study(study, spec)
        except ZeroVarianceError as exc:
            logger.warning("skipping study %s: %s", study.study_id, exc)
            skipped.append(study.study_id)
            continue
        row = study_effects(composite, [SIGNATURE])
        if not np.isfinite(row["delta"].iloc[0]):
            logger.warning("skipping study %s: signature not estimable", study.study_id)
            skipped.append(study.study_id)
            continue
        frames.append(row)
    if len(frames) < 2:
        raise InsufficientDataError("evaluation needs at least 2 usable studies")
    per_study = pd.concat(frames, ignore_index=True)
    pooled = meta.pool_effects(
        meta.MetaInput(SIGNATURE, per_study["delta"].to_numpy(), per_study["var_delta"].to_numpy(),
                       tuple(per_study["study"]), tuple(per_study["n"])),
        method=method,
        variance_method=variance_method,
        level=1 - 2 * alpha,
        pi_level=0.95,
    )
    per_study["weight"] = pooled.weights
    lo, up, p = tost_p(pooled.mu_hat, pooled.se_pooled, pooled.df, epsilon_eval)
    pairs = EffectPairs(per_study["u_y"].to_numpy(), per_study["u_s"].to_numpy(), per_study["n"].to_numpy())
    return SignatureEvaluation(
        per_study=per_study,
        pooled=pooled,
        p_lower=lo,
        p_upper=up,
        p_tost=p,
        epsilon=epsilon_eval,
        alpha=alpha,
        significant=p < alpha,
        metrics=agreement_metrics(pairs, n_boot=n_boot, seed=seed),
        skipped=skipped,
    )


def agreement_metrics(pairs: EffectPairs, *, n_boot=2000, level=0.95, seed=0) -> pd.DataFrame:
    """CCC, ICC(2,1) and R^2_trial with BCa intervals (NaN where undefined)."""
    rows = []
    for name, fn in (("ccc", ccc), ("icc21", icc21), ("r2_trial_wls", r2_trial_wls)):
        try:
            value = fn(pairs)
        except (UndefinedStatisticError, InsufficientDataError) as exc:
            logger.warning("%s undefined: %s", name, exc)
            rows.append({"metric": name, "estimate": math.nan, "ci_low": math.nan, "ci_high": math.nan})
            continue
        low = high = math.nan
        if n_boot:
            try:
                low, high = bca_bootstrap_ci(name, pairs, B=n_boot, level=level, seed=seed)
            except Exception as exc:  # bootstrap failure should not sink the report
                logger.warning("%s bootstrap failed: %s", name, exc)
        rows.append({"metric": name, "estimate": value, "ci_low": low, "ci_high": high})
    return pd.DataFrame(rows)
