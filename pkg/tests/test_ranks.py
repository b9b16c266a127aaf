import math

import numpy as np
import pytest
from conftest import brute_paired, brute_two_arm, paired_study, two_arm_study
from hypothesis import given, settings
from hypothesis import strategies as st

from surrmeta.ranks import (
    check_dominance_c2,
    estimate_paired,
    estimate_two_arm,
    g_compare,
    jackknife_var_two_arm,
    paired_effects,
    select_epsilon_power,
    study_effects,
)
from surrmeta.validation import InsufficientDataError


def test_g_compare_values():
    assert g_compare(2, 1) == 1
    assert g_compare(1, 1) == 0.5
    assert g_compare(1, 2) == 0
    np.testing.assert_array_equal(g_compare([1, 2, 3], [2, 2, 2]), [0, 0.5, 1])


def test_paired_hand_examples():
    e = estimate_paired([1, 2, 3], [2, 3, 4], [1, 2, 3], [2, 3, 4])
    assert (e.u_y, e.u_s, e.delta, e.var_delta) == (1.0, 1.0, 0.0, 0.0)
    e = estimate_paired([1, 3, 2, 5], [2, 4, 1, 6], [1, 3, 2, 5], [2, 4, 1, 6])
    assert e.u_y == 0.75
    e = estimate_paired([0, 0], [1, 1], [1, 2], [1, 3])
    assert e.u_s == 0.75


def test_paired_variance_formula():
    # d = G(y) - G(s) = [1, 0, 1/2, 0]
    e = estimate_paired([0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 1], [-1, 1, 0, 2])
    d = np.array([1, 0, 0.5, 0])
    assert e.var_delta == pytest.approx(np.var(d, ddof=1) / 4, rel=1e-15)
    assert e.delta == e.u_y - e.u_s


def test_paired_needs_two_pairs():
    with pytest.raises(InsufficientDataError):
        estimate_paired([1], [2], [1], [2])


def test_two_arm_hand_examples():
    assert estimate_two_arm([3, 4], [3, 4], [1, 2], [1, 2]).u_y == 1.0
    e = estimate_two_arm([1, 2], [1, 2], [1, 2], [1, 2])
    assert e.u_y == 0.5
    assert e.delta == 0 and e.var_delta == 0
    with pytest.raises(InsufficientDataError):
        estimate_two_arm([1], [1], [1, 2], [1, 2])


def _exactly(est, oracle):
    assert est.u_y == float(oracle["u_y"])
    assert est.u_s == float(oracle["u_s"])
    assert est.delta == float(oracle["u_y"]) - float(oracle["u_s"])
    assert est.var_delta == float(oracle["var_delta"])
    assert est.se_u_y == math.sqrt(float(oracle["var_uy"]))


@pytest.mark.parametrize("seed", range(40))
def test_paired_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    y0, y1, s0, s1 = (rng.integers(0, 4, n).astype(float) for _ in range(4))  # many ties
    _exactly(estimate_paired(y0, y1, s0, s1), brute_paired(y0, y1, s0, s1))


@pytest.mark.parametrize("seed", range(40))
def test_two_arm_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    n1, n0 = (int(v) for v in rng.integers(2, 21, 2))
    y_t, s_t = rng.integers(0, 5, n1).astype(float), rng.integers(0, 5, n1).astype(float)
    y_c, s_c = rng.integers(0, 5, n0).astype(float), rng.integers(0, 5, n0).astype(float)
    _exactly(estimate_two_arm(y_t, s_t, y_c, s_c), brute_two_arm(y_t, s_t, y_c, s_c))


def test_projection_variance_close_to_jackknife():
    rng = np.random.default_rng(3)
    y_t, y_c = rng.normal(0.5, 1, 60), rng.normal(0, 1, 50)
    s_t, s_c = y_t + rng.normal(0, 1, 60), y_c + rng.normal(0, 1, 50)
    proj = estimate_two_arm(y_t, s_t, y_c, s_c).var_delta
    jack = jackknife_var_two_arm(y_t, s_t, y_c, s_c)
    assert proj == pytest.approx(jack, rel=0.1)


def test_vectorised_paired_masks_per_marker():
    y0, y1 = np.array([0.0, 0, 0, 0]), np.array([1.0, 1, 1, 1])
    s0 = np.array([[0, 0], [0, np.nan], [0, 0], [0, 0]])
    s1 = np.array([[1, 1], [1, 1], [-1, -1], [1, 1]])
    out = paired_effects(y0, y1, s0, s1)
    assert list(out["n"]) == [4, 3]
    assert out["u_s"].iloc[0] == 0.75
    assert out["u_s"].iloc[1] == pytest.approx(2 / 3, rel=1e-15)


def test_study_effects_with_na_marker_excludes_subject_for_that_marker_only():
    s0 = np.array([[1, 1], [2, np.nan], [3, 3]])
    s1 = np.array([[2, 2], [3, 3], [4, 4]])
    st_ = paired_study("a", [1, 2, 3], [2, 3, 4], s0, s1)
    eff = study_effects(st_)
    assert list(eff["n"]) == [3, 2]
    assert list(eff.columns[:2]) == ["study", "marker"]


def test_two_arm_study_effects_match_direct():
    rng = np.random.default_rng(9)
    y_t, y_c = rng.normal(size=7), rng.normal(size=5)
    s_t, s_c = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    eff = study_effects(two_arm_study("t", y_t, s_t, y_c, s_c))
    for k in range(3):
        direct = estimate_two_arm(y_t, s_t[:, k], y_c, s_c[:, k])
        assert eff["delta"].iloc[k] == direct.delta
        assert eff["var_delta"].iloc[k] == direct.var_delta


def test_select_epsilon_power():
    assert select_epsilon_power([0.1]) == pytest.approx(0.248647, abs=1e-6)
    assert select_epsilon_power([0.1, 0.1]) == pytest.approx(select_epsilon_power([0.1]))
    assert select_epsilon_power([0.05]) == pytest.approx(select_epsilon_power([0.1]) / 2)
    with pytest.raises(ValueError):
        select_epsilon_power([0.1, 0.0])


def test_dominance_check():
    s_c = np.array([0.1, 0.5, 0.9])
    res = check_dominance_c2(s_c + 1, s_c)
    assert res.max_violation == 0 and res.passed
    assert check_dominance_c2(s_c, s_c).passed
    res = check_dominance_c2([0, 0], [1, 1])
    assert res.max_violation == 1 and not res.passed


# ------------------------------------------------------------- properties

small = st.lists(st.integers(-3, 3), min_size=2, max_size=12)


@st.composite
def paired_data(draw):
    n = draw(st.integers(2, 12))
    arr = st.lists(st.integers(-3, 3), min_size=n, max_size=n)
    return [np.array(draw(arr), float) for _ in range(4)]


@given(paired_data())
@settings(max_examples=150, deadline=None)
def test_paired_monotone_invariance_and_bounds(data):
    y0, y1, s0, s1 = data
    e = estimate_paired(y0, y1, s0, s1)
    f = estimate_paired(np.exp(y0), np.exp(y1), 3 * s0 + 1, 3 * s1 + 1)
    assert (e.u_y, e.u_s, e.delta, e.var_delta) == (f.u_y, f.u_s, f.delta, f.var_delta)
    assert 0 <= e.u_y <= 1 and 0 <= e.u_s <= 1 and e.var_delta >= 0
    swapped = estimate_paired(y1, y0, s1, s0)
    assert swapped.u_y == pytest.approx(1 - e.u_y, abs=1e-15)


@given(small, small, small, small)
@settings(max_examples=150, deadline=None)
def test_two_arm_properties(yt, yc, st_, sc):
    k1, k0 = min(len(yt), len(st_)), min(len(yc), len(sc))
    y_t, s_t = np.array(yt[:k1], float), np.array(st_[:k1], float)
    y_c, s_c = np.array(yc[:k0], float), np.array(sc[:k0], float)
    e = estimate_two_arm(y_t, s_t, y_c, s_c)
    f = estimate_two_arm(y_t**3, np.arctan(s_t), y_c**3, np.arctan(s_c))
    assert (e.u_y, e.u_s, e.var_delta) == (f.u_y, f.u_s, f.var_delta)
    assert e.var_delta >= 0
    swapped = estimate_two_arm(y_c, s_c, y_t, s_t)
    assert swapped.u_y == pytest.approx(1 - e.u_y, abs=1e-15)
