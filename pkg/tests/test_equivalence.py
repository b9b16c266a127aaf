import logging

import numpy as np
import pytest
from conftest import naive_step_up
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from statsmodels.stats.multitest import multipletests

from surrmeta.equivalence import (
    EquivalenceResult,
    bh_adjust,
    equivalence_results,
    lead,
    screen_markers,
    tost_p,
    tost_p_values,
)


def test_tost_boundary_and_oracle():
    lo, up, p = tost_p(0.1, 0.05, 4, 0.1)
    assert up == pytest.approx(0.5) and p >= 0.5
    lo, up, p = tost_p(0.02, 0.03, 4, 0.1)
    assert lo == pytest.approx(1 - stats.t.cdf(4.0, 4), abs=1e-14)
    assert up == pytest.approx(stats.t.cdf(-8 / 3, 4), abs=1e-14)
    assert p == up
    assert tost_p(0.0, 0.0, 4, 0.1) == (0.0, 0.0, 0.0)


def test_tost_point_mass_rules():
    assert tost_p(0.1, 0.0, 3, 0.1)[2] == 0.5
    assert tost_p(-0.1, 0.0, 3, 0.1)[2] == 0.5
    assert tost_p(0.3, 0.0, 3, 0.1)[2] == 1.0


def test_tost_normal_reference():
    lo, up, _ = tost_p(0.02, 0.03, np.inf, 0.1)
    assert lo == pytest.approx(stats.norm.sf(4.0))
    assert up == pytest.approx(stats.norm.cdf(-8 / 3))


def test_tost_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        tost_p(0, 0.1, 3, 0.0)
    with pytest.raises(ValueError):
        tost_p(0, 0.1, 3, -1)


def test_bh_hand_examples():
    assert bh_adjust([0.05]) == pytest.approx([0.05])
    assert bh_adjust([0.025, 0.05]) == pytest.approx([0.05, 0.05])
    assert bh_adjust([0.3] * 4) == pytest.approx([0.3] * 4)
    np.testing.assert_allclose(bh_adjust([0.01, 0.04, 0.03, 0.2]), [0.04, 0.16 / 3, 0.16 / 3, 0.2])
    with pytest.raises(ValueError):
        bh_adjust([0.1, 1.2])


@pytest.mark.parametrize("seed", range(20))
def test_bh_matches_naive_and_statsmodels(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, int(rng.integers(1, 40))) ** 3
    ours = bh_adjust(p)
    np.testing.assert_allclose(ours, naive_step_up(p), rtol=0, atol=1e-15)
    np.testing.assert_allclose(ours, multipletests(p, method="fdr_bh")[1], rtol=0, atol=1e-15)


def test_screen_markers():
    res = [EquivalenceResult("b", 0, 0, 0, 0.01, 0.1, True), EquivalenceResult("a", 0, 0, 0, 0.2, 0.1, False)]
    assert screen_markers(res, 0.05) == ["b"]


def test_screen_markers_empty_reported(caplog):
    res = [EquivalenceResult("a", 0, 0, 0, 0.2, 0.1, False)]
    with caplog.at_level(logging.WARNING):
        assert screen_markers(res, 0.05) == []
    assert "no marker" in caplog.text


def test_equivalence_results_sorted_gamma():
    res = equivalence_results(["z", "a", "m"], [0.0, 0.0, 0.5], [0.01, 0.01, 0.01], 5, 0.1)
    assert screen_markers(res, 0.05) == ["a", "z"]
    assert all(r.p_adjusted >= r.p_tost for r in res)


def test_lead_closed_form():
    for mu, se, df in [(0.02, 0.03, 4), (-0.05, 0.01, 9), (0.0, 0.2, 2)]:
        expected = abs(mu) + stats.t.ppf(0.95, df) * se
        assert lead(mu, se, df, 0.05) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_tost_ci_duality(seed):
    rng = np.random.default_rng(seed)
    n = 200
    mu = rng.normal(0, 0.1, n)
    se = rng.uniform(0.001, 0.1, n)
    df = rng.integers(1, 30, n).astype(float)
    eps, alpha = 0.1, 0.05
    p = tost_p_values(mu, se, df, eps)[2]
    half = stats.t.ppf(1 - alpha, df) * se
    inside = (mu - half > -eps) & (mu + half < eps)
    assert np.array_equal(p < alpha, inside)


@given(st.floats(-1, 1), st.floats(1e-4, 1), st.integers(1, 50), st.floats(1e-3, 1), st.floats(1e-3, 1))
@settings(max_examples=200, deadline=None)
def test_tost_monotone_in_epsilon(mu, se, df, e1, e2):
    lo_eps, hi_eps = sorted((e1, e2))
    assert tost_p(mu, se, df, hi_eps)[2] <= tost_p(mu, se, df, lo_eps)[2] + 1e-15


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms(use_true_random=False))
@settings(max_examples=200, deadline=None)
def test_bh_permutation_invariant_and_monotone(p, rnd):
    p = np.array(p)
    perm = np.arange(len(p))
    rnd.shuffle(perm)
    np.testing.assert_allclose(bh_adjust(p)[perm], bh_adjust(p[perm]))
    adj = bh_adjust(p)
    order = np.argsort(p, kind="mergesort")
    assert np.all(np.diff(adj[order]) >= -1e-15)
    assert np.all(adj >= p - 1e-15)
