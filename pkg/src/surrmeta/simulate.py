"""Monte Carlo checks of the pooled equivalence test.

Parametric scenarios draw study-level estimates directly from the two-level
normal model (known within-study variances). The permutation scheme shuffles
the primary-endpoint pairs across subjects within each study of paired data.

Markers are simulated in fixed-size blocks, each with its own generator keyed
on ``(seed, block)``; results therefore do not depend on the thread count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .data import PAIRED, StudyDataset
from .equivalence import tost_p_values
from .meta import pool_batch
from .pipeline import all_study_effects, parse_meta, pool_markers, resolve_epsilon
from .validation import check_random_state

LFC = "LFC"
UNIFORM_VALID = "uniform_valid"
FIXED = "fixed"
MU_REGIMES = (LFC, UNIFORM_VALID, FIXED)


@dataclass(frozen=True)
class SimConfig:
    J: int = 20_000
    M: int = 10
    n_m: object = 10
    epsilon: float = 0.1
    alpha: float = 0.05
    u_tau2_max: float = 0.01
    u_nu_max: float = 10.0
    mu_regime: str = LFC
    mu_fixed: float = 0.0
    meta_method: str = "re-hksj"
    seed: int = 0
    block_size: int = 1000

    def __post_init__(self):
        if self.mu_regime not in MU_REGIMES:
            raise ValueError(f"mu_regime must be one of {MU_REGIMES}")
        if self.J < 1 or self.M < 2:
            raise ValueError("need J >= 1 and M >= 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.u_tau2_max < 0 or self.u_nu_max < 0:
            raise ValueError("heterogeneity bounds must be non-negative")
        if np.any(np.asarray(self.n_m) <= 0):
            raise ValueError("study sizes must be positive")
        if np.ndim(self.n_m) and len(self.n_m) != self.M:
            raise ValueError("n_m list must have M entries")
        parse_meta(self.meta_method)

    @property
    def study_sizes(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.n_m, dtype=float), (self.M,))

    def to_json(self) -> str:
        d = asdict(self)
        if np.ndim(d["n_m"]):
            d["n_m"] = [int(x) for x in d["n_m"]]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        d = dict(d)
        if isinstance(d.get("n_m"), list):
            d["n_m"] = tuple(d["n_m"])
        return cls(**d)

    @classmethod
    def from_json(cls, text) -> "SimConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class SimSummary:
    """Tidy table: one row per configuration and nominal level."""

    rows: pd.DataFrame

    def to_csv(self, path=None):
        return self.rows.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")

    @staticmethod
    def concat(summaries) -> "SimSummary":
        return SimSummary(pd.concat([s.rows for s in summaries], ignore_index=True))


def mc_se(rate, n):
    return math.sqrt(rate * (1 - rate) / n)


# ------------------------------------------------------------ generation


def draw_markers(config: SimConfig, rng, size: int):
    """Draw ``size`` markers: returns ``(mu, delta_hat, sigma2)``.

    ``delta_hat`` and ``sigma2`` have shape ``(size, M)``; ``sigma2`` is the true
    within-study variance ``nu / n_m``.
    """
    rng = check_random_state(rng)
    eps, m = config.epsilon, config.M
    if config.mu_regime == LFC:
        mu = np.where(rng.random(size) < 0.5, -eps, eps)
    elif config.mu_regime == UNIFORM_VALID:
        mu = rng.uniform(-eps, eps, size)
    else:
        mu = np.full(size, float(config.mu_fixed))
    tau2 = rng.uniform(0.0, config.u_tau2_max, size)
    delta = mu[:, None] + np.sqrt(tau2)[:, None] * rng.standard_normal((size, m))
    nu = rng.uniform(0.0, config.u_nu_max, size)
    sigma2 = nu[:, None] / config.study_sizes[None, :]
    dhat = delta + np.sqrt(sigma2) * rng.standard_normal((size, m))
    return mu, dhat, sigma2


def draw_marker(config: SimConfig, rng):
    """Single-marker form of :func:`draw_markers`: ``(mu, delta_hat, sigma2)``."""
    mu, d, v = draw_markers(config, rng, 1)
    return float(mu[0]), d[0], v[0]


def _block_pvalues(config: SimConfig, block: int) -> np.ndarray:
    start = block * config.block_size
    size = min(config.block_size, config.J - start)
    rng = np.random.default_rng([config.seed, block])
    _, dhat, sigma2 = draw_markers(config, rng, size)
    method, variance_method = parse_meta(config.meta_method)
    r = pool_batch(dhat, sigma2, method=method, variance_method=variance_method)
    return tost_p_values(r["mu"], r["se"], r["df"], config.epsilon)[2]


def simulate_pvalues(config: SimConfig, threads: int = 1) -> np.ndarray:
    """TOST p-values for ``config.J`` simulated markers."""
    n_blocks = -(-config.J // config.block_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _block_pvalues(config, b), range(n_blocks)))
    else:
        parts = [_block_pvalues(config, b) for b in range(n_blocks)]
    return np.concatenate(parts)


def summarize(config: SimConfig, p: np.ndarray, alphas, scenario: str) -> SimSummary:
    rows = []
    for a in alphas:
        rate = float(np.mean(p < a))
        rows.append(
            {
                "scenario": scenario,
                "meta_method": config.meta_method,
                "mu_regime": config.mu_regime,
                "mu_fixed": config.mu_fixed if config.mu_regime == FIXED else math.nan,
                "M": config.M,
                "n_m": config.n_m if not np.ndim(config.n_m) else "|".join(map(str, config.n_m)),
                "epsilon": config.epsilon,
                "u_tau2_max": config.u_tau2_max,
                "u_nu_max": config.u_nu_max,
                "J": config.J,
                "seed": config.seed,
                "alpha": a,
                "rate": rate,
                "mc_se": mc_se(rate, config.J),
            }
        )
    return SimSummary(pd.DataFrame(rows))


def run_calibration(config: SimConfig, alpha_grid=(0.01, 0.025, 0.05, 0.1), threads: int = 1) -> SimSummary:
    """Empirical false positive rate under the least favourable configuration."""
    if config.mu_regime != LFC:
        config = replace(config, mu_regime=LFC)
    return summarize(config, simulate_pvalues(config, threads), alpha_grid, "calibration")


def run_power(config: SimConfig, alpha=None, threads: int = 1) -> SimSummary:
    """Empirical power for valid markers (``uniform_valid`` unless ``fixed`` is set)."""
    if config.mu_regime == LFC:
        config = replace(config, mu_regime=UNIFORM_VALID)
    a = config.alpha if alpha is None else alpha
    return summarize(config, simulate_pvalues(config, threads), [a], "power")


def samples_grid(epsilon=0.1, J=20_000, seed=0, meta="re-hksj"):
    """M in {3, 10, 25} x n_m in {10, 50, 250} with ``u_tau2_max = eps/10``, ``u_nu_max = 100 eps``."""
    return [
        SimConfig(J=J, M=M, n_m=n, epsilon=epsilon, u_tau2_max=epsilon / 10, u_nu_max=100 * epsilon,
                  meta_method=meta, seed=seed)
        for M in (3, 10, 25)
        for n in (10, 50, 250)
    ]


def heterogeneity_grid(epsilon=0.1, J=20_000, seed=0, meta="re-hksj", M=10, n_m=10):
    """``u_tau2_max`` and ``u_nu_max / n_m`` each in ``eps * {1/10, 1, 10}``."""
    return [
        SimConfig(J=J, M=M, n_m=n_m, epsilon=epsilon, u_tau2_max=ut * epsilon, u_nu_max=un * epsilon * n_m,
                  meta_method=meta, seed=seed)
        for ut in (0.1, 1.0, 10.0)
        for un in (0.1, 1.0, 10.0)
    ]


def power_grid(epsilon=0.1, J=20_000, seed=0, meta="re-hksj", n_m=50):
    """``u_tau2_max = u_nu_max`` in ``eps * {1/100, 1/10, 1, 10, 100}`` for M in {3, 10, 25}."""
    return [
        SimConfig(J=J, M=M, n_m=n_m, epsilon=epsilon, u_tau2_max=u * epsilon, u_nu_max=u * epsilon,
                  mu_regime=UNIFORM_VALID, meta_method=meta, seed=seed)
        for M in (3, 10, 25)
        for u in (0.01, 0.1, 1.0, 10.0, 100.0)
    ]


# ----------------------------------------------------------- permutation


def permute_within_study(data: StudyDataset, seed) -> StudyDataset:
    """Shuffle (pre, post) endpoint pairs across subjects; markers are untouched."""
    if data.design != PAIRED:
        raise ValueError("the permutation scheme is defined for paired data only")
    rng = check_random_state(seed)
    ids, y0, y1, _, _ = data.paired_arrays()
    perm = rng.permutation(len(ids))
    pos = {sid: i for i, sid in enumerate(ids)}
    new_y = np.empty(len(data.y))
    for r, (sid, a) in enumerate(zip(data.subjects, data.arm)):
        src = perm[pos[sid]]
        new_y[r] = y1[src] if a == 1 else y0[src]
    return data.with_y(new_y)


@dataclass
class PermutationSummary:
    fpr: np.ndarray
    alpha: float
    n_per_study: int | None
    n_studies: int | None
    epsilon: float = math.nan

    @property
    def mean(self) -> float:
        return float(np.mean(self.fpr))

    @property
    def max(self) -> float:
        return float(np.max(self.fpr))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "replicate": np.arange(len(self.fpr)),
                "n_per_study": self.n_per_study if self.n_per_study is not None else math.nan,
                "n_studies": self.n_studies if self.n_studies is not None else math.nan,
                "alpha": self.alpha,
                "epsilon": self.epsilon,
                "fpr": self.fpr,
            }
        )


def run_permutation_fpr(
    data: Sequence[StudyDataset],
    n_reps: int,
    n_per_study: int | None = None,
    n_studies: int | None = None,
    alpha: float = 0.05,
    seed: int = 0,
    *,
    epsilon=0.1,
    meta: str = "re-hksj",
) -> PermutationSummary:
    """Empirical FPR of the screening stage on permuted paired studies.

    Each replicate optionally samples ``n_studies`` studies, subsamples
    ``n_per_study`` subjects per study, permutes the endpoint pairs, runs
    estimation + pooling + TOST (raw p-values) and records the fraction of markers
    with ``p < alpha``. ``epsilon`` may be a float or ``("power", alpha, power)``
    resolved once on the full supplied data (permuting whole endpoint pairs
    leaves ``U_Y`` and its standard error unchanged there).
    """
    data = list(data)
    if any(d.design != PAIRED for d in data):
        raise ValueError("permutation FPR needs paired studies")
    if n_studies is not None and not 2 <= n_studies <= len(data):
        raise ValueError(f"cannot draw {n_studies} studies from {len(data)}")
    if n_per_study is not None:
        if n_per_study < 2:
            raise ValueError("n_per_study must be at least 2")
        small = [d.study_id for d in data if d.n_subjects < n_per_study]
        if small:
            raise ValueError(f"studies with fewer than {n_per_study} subjects: {small}")
    method, variance_method = parse_meta(meta)
    eps = resolve_epsilon(data, epsilon)
    fpr = np.empty(n_reps)
    for b in range(n_reps):
        rng = np.random.default_rng([seed, b])
        chosen = data
        if n_studies is not None:
            pick = np.sort(rng.choice(len(data), size=n_studies, replace=False))
            chosen = [data[i] for i in pick]
        rep = []
        for d in chosen:
            if n_per_study is not None:
                ids = d.subject_ids
                keep = np.sort(rng.choice(len(ids), size=n_per_study, replace=False))
                d = d.select_subjects([ids[i] for i in keep])
            rep.append(permute_within_study(d, rng))
        effects = all_study_effects(rep)
        table, *_ = pool_markers(effects, method=method, variance_method=variance_method, alpha=alpha)
        p = tost_p_values(table["mu"].to_numpy(), table["se"].to_numpy(), table["df"].to_numpy(), eps)[2]
        fpr[b] = np.mean(p < alpha)
    return PermutationSummary(fpr, alpha, n_per_study, n_studies, eps)


# ------------------------------------------------------ synthetic studies


def synthetic_paired_studies(
    n_studies: int,
    n_subjects: int,
    n_markers: int,
    seed=0,
    *,
    n_planted: int = 0,
    planted_corr: float = 0.995,
    effect_range=(0.0, 1.0),
    corr_range=(0.0, 0.5),
    shift_range=(-2.0, -1.0),
) -> list[StudyDataset]:
    """Paired pre/post studies with an individual-level Y-S association.

    Per study ``y1 = y0 + theta_m + e`` with ``theta_m ~ U(effect_range)`` and
    ``e ~ N(0, 1)``. Noise marker ``j`` at time ``a`` is
    ``r_j * y_a + sqrt(1 - r_j^2) * noise + a * kappa_jm`` with
    ``r_j ~ U(corr_range)`` and ``kappa_jm ~ U(shift_range)``. The first
    ``n_planted`` markers (``planted_k``) have baseline ``s0 = y0 + noise`` and
    change ``s1 - s0 = theta_m + r e + sqrt(1 - r^2) e'`` with ``r = planted_corr``:
    the change has the same distribution as Y's, so ``U_S = U_Y`` in every study.
    """
    rng = check_random_state(seed)
    n_sizes = np.broadcast_to(np.asarray(n_subjects), (n_studies,))
    n_noise = n_markers - n_planted
    r = rng.uniform(*corr_range, n_noise)
    names = tuple([f"planted_{k}" for k in range(n_planted)] + [f"m{k:03d}" for k in range(n_noise)])
    rp = float(planted_corr)
    out = []
    for m in range(n_studies):
        n = int(n_sizes[m])
        theta = rng.uniform(*effect_range)
        kappa = rng.uniform(*shift_range, n_noise)
        y0 = rng.standard_normal(n)
        e = rng.standard_normal(n)
        y1 = y0 + theta + e
        scale = np.sqrt(1 - r**2)
        s0 = r * y0[:, None] + scale * rng.standard_normal((n, n_noise))
        s1 = r * y1[:, None] + scale * rng.standard_normal((n, n_noise)) + kappa
        p0 = y0[:, None] + rng.standard_normal((n, n_planted))
        p1 = p0 + theta + rp * e[:, None] + math.sqrt(1 - rp * rp) * rng.standard_normal((n, n_planted))
        subj = np.array([f"s{m}_{i}" for i in range(n)], dtype=object)
        out.append(
            StudyDataset(
                f"study{m + 1}",
                PAIRED,
                np.concatenate([subj, subj]),
                np.concatenate([np.zeros(n, int), np.ones(n, int)]),
                np.concatenate([y0, y1]),
                np.vstack([np.hstack([p0, s0]), np.hstack([p1, s1])]),
                names,
            )
        )
    return out
