"""scikit-learn style wrappers around the screening pipeline and the pooling engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import meta
from .data import StudyDataset
from .pipeline import parse_meta, screen
from .signature import evaluate_signature, signature_study


def check_studies(X, min_studies=1):
    """Validate a collection of :class:`StudyDataset` and return it as a list."""
    if isinstance(X, StudyDataset):
        X = [X]
    X = list(X)
    if len(X) < min_studies:
        raise ValueError(f"expected at least {min_studies} studies, got {len(X)}")
    for d in X:
        if not isinstance(d, StudyDataset):
            raise TypeError(f"expected StudyDataset, got {type(d).__name__}")
    ids = [d.study_id for d in X]
    if len(set(ids)) != len(ids):
        raise ValueError("study ids must be unique")
    return X


class SurrogateScreener(TransformerMixin, BaseEstimator):
    """Screen candidate markers across studies and build a composite signature.

    ``fit`` takes a list of :class:`StudyDataset` (screening data); ``transform``
    appends the standardised weighted composite as a marker named ``"signature"``
    to each study it is given.

    Parameters
    ----------
    epsilon : float or "power"
        Equivalence bound, or ``"power"`` to derive it from ``epsilon_power``.
    epsilon_power : tuple of (alpha, power)
    alpha : float
        Significance level for the TOST and the BH-adjusted screening.
    meta : {"re-hksj", "re-conv", "fe"}
    threads : int
        Worker threads for per-study estimation (results do not depend on it).
    """

    def __init__(self, epsilon=0.1, epsilon_power=(0.05, 0.80), alpha=0.05, meta="re-hksj", threads=1):
        self.epsilon = epsilon
        self.epsilon_power = epsilon_power
        self.alpha = alpha
        self.meta = meta
        self.threads = threads

    def _epsilon_arg(self):
        if isinstance(self.epsilon, str):
            if self.epsilon != "power":
                raise ValueError("epsilon must be a float or 'power'")
            return ("power", *self.epsilon_power)
        return self.epsilon

    def fit(self, X, y=None):
        X = check_studies(X, min_studies=2)
        parse_meta(self.meta)
        res = screen(X, self._epsilon_arg(), self.alpha, meta_method=self.meta, threads=self.threads)
        self.result_ = res
        self.results_ = res.table
        self.effects_ = res.effects
        self.signature_ = res.signature
        self.epsilon_ = res.epsilon
        self.selected_ = res.selected
        return self

    def transform(self, X):
        check_is_fitted(self, "signature_")
        if self.signature_.is_empty:
            raise ValueError("the fitted signature is empty; nothing to transform")
        return [signature_study(d, self.signature_) for d in check_studies(X)]

    def evaluate(self, X, epsilon=None, **kwargs):
        """Evaluate the fitted signature on held-out studies.

        ``epsilon=None`` reuses the screening bound; ``"power"`` recomputes it on ``X``.
        """
        check_is_fitted(self, "signature_")
        X = check_studies(X, min_studies=2)
        if epsilon is None:
            eps = self.epsilon_
        elif isinstance(epsilon, str):
            from .pipeline import power_epsilon

            eps = power_epsilon(X, *self.epsilon_power)
        else:
            eps = float(epsilon)
        method, variance_method = parse_meta(self.meta)
        return evaluate_signature(X, self.signature_, eps, self.alpha, method=method, variance_method=variance_method, **kwargs)


class RandomEffectsMeta(BaseEstimator):
    """Pool per-study estimates of a single effect.

    ``fit(deltas, variances)`` sets ``mu_``, ``tau2_``, ``se_``, ``df_``,
    ``ci_`` and (random effects only) ``pi_``.
    """

    def __init__(self, method="RE", variance_method="HKSJ", level=0.95, hksj_floor=False):
        self.method = method
        self.variance_method = variance_method
        self.level = level
        self.hksj_floor = hksj_floor

    def fit(self, deltas, variances):
        deltas = np.asarray(deltas, dtype=float)
        variances = np.asarray(variances, dtype=float)
        res = meta.pool_effects(
            deltas, variances, method=self.method, variance_method=self.variance_method,
            level=self.level, pi_level=self.level, hksj_floor=self.hksj_floor,
        )
        self.result_ = res
        self.mu_ = res.mu_hat
        self.tau2_ = res.tau2_hat
        self.se_ = res.se_pooled
        self.df_ = res.df
        self.weights_ = res.weights
        self.ci_ = (res.ci_low, res.ci_high)
        self.pi_ = (res.pi_low, res.pi_high)
        return self

    def prediction_interval(self, level=None):
        check_is_fitted(self, "result_")
        return meta.prediction_interval(self.result_, self.level if level is None else level)
