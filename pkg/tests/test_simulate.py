import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from conftest import paired_study, two_arm_study

from surrmeta.simulate import (
    FIXED,
    UNIFORM_VALID,
    SimConfig,
    SimSummary,
    draw_marker,
    draw_markers,
    heterogeneity_grid,
    mc_se,
    permute_within_study,
    power_grid,
    run_calibration,
    run_permutation_fpr,
    run_power,
    samples_grid,
    simulate_pvalues,
    synthetic_paired_studies,
)


def test_lfc_signs_balanced():
    cfg = SimConfig(J=20_000)
    mu, dhat, sigma2 = draw_markers(cfg, np.random.default_rng(0), 20_000)
    assert set(np.abs(mu)) == {0.1}
    frac = np.mean(mu > 0)
    assert abs(frac - 0.5) <= 3 * mc_se(0.5, 20_000)
    assert dhat.shape == sigma2.shape == (20_000, 10)
    assert np.all(sigma2 <= cfg.u_nu_max / cfg.n_m)


def test_fixed_regime_centred():
    cfg = SimConfig(mu_regime=FIXED, mu_fixed=0.0, u_tau2_max=0.01, u_nu_max=1.0)
    mu, dhat, _ = draw_markers(cfg, np.random.default_rng(1), 5000)
    assert np.all(mu == 0)
    assert abs(dhat.mean()) < 4 * dhat.std() / math.sqrt(dhat.size)
    m, d, v = draw_marker(cfg, 2)
    assert m == 0 and d.shape == v.shape == (10,)


def test_uniform_valid_inside_bound():
    mu, _, _ = draw_markers(SimConfig(mu_regime=UNIFORM_VALID), np.random.default_rng(3), 1000)
    assert np.all(np.abs(mu) < 0.1)


def test_alpha_zero_and_rate_bounds():
    s = run_calibration(SimConfig(J=2000), alpha_grid=(0.0, 0.05))
    rows = s.rows.set_index("alpha")
    assert rows.loc[0.0, "rate"] == 0
    assert 0 <= rows.loc[0.05, "rate"] <= 1


def test_calibration_within_nominal():
    s = run_calibration(SimConfig(J=5000, seed=4))
    for _, row in s.rows.iterrows():
        assert row["rate"] <= row["alpha"] + 3 * math.sqrt(row["alpha"] * (1 - row["alpha"]) / row["J"])


def test_thread_count_does_not_change_results():
    cfg = SimConfig(J=3500, block_size=1000)
    np.testing.assert_array_equal(simulate_pvalues(cfg, 1), simulate_pvalues(cfg, 4))
    assert not np.array_equal(simulate_pvalues(cfg), simulate_pvalues(replace(cfg, seed=1)))


def test_config_json_round_trip():
    cfg = SimConfig(J=123, M=3, n_m=(5, 6, 7), mu_regime=FIXED, mu_fixed=0.02)
    assert SimConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        SimConfig(mu_regime="bad")
    with pytest.raises(ValueError):
        SimConfig(M=3, n_m=(5, 6))


def test_summary_csv_lf(tmp_path):
    s = SimSummary.concat([run_power(SimConfig(J=200)), run_calibration(SimConfig(J=200))])
    path = tmp_path / "s.csv"
    s.to_csv(path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw and raw.count(b"\n") == 1 + 1 + 4
    assert set(s.rows["scenario"]) == {"power", "calibration"}


def test_grids():
    assert len(samples_grid(J=10)) == 9
    het = heterogeneity_grid(J=10)
    assert len(het) == 9 and sorted({c.u_tau2_max for c in het}) == pytest.approx([0.01, 0.1, 1.0])
    pg = power_grid(J=10)
    assert len(pg) == 15 and all(c.mu_regime == UNIFORM_VALID for c in pg)


def test_power_increases_with_studies():
    rates = [run_power(SimConfig(J=2000, M=M, n_m=50, u_tau2_max=0.001, u_nu_max=0.001)).rows["rate"][0] for M in (3, 10, 25)]
    assert rates[0] <= rates[1] <= rates[2]
    assert rates[2] > 0.5


def test_power_symmetric_in_mu():
    a = run_power(SimConfig(J=3000, mu_regime=FIXED, mu_fixed=0.03, u_tau2_max=0.001, u_nu_max=0.1)).rows["rate"][0]
    b = run_power(SimConfig(J=3000, mu_regime=FIXED, mu_fixed=-0.03, u_tau2_max=0.001, u_nu_max=0.1)).rows["rate"][0]
    assert abs(a - b) <= 4 * mc_se(0.5, 3000) * math.sqrt(2)


def test_lfc_rate_drops_away_from_the_boundary():
    base = SimConfig(J=3000, mu_regime=FIXED, u_tau2_max=0.001, u_nu_max=1.0)
    rates = [run_power(replace(base, mu_fixed=m)).rows["rate"][0] for m in (0.1, 0.15, 0.3)]
    assert rates[0] >= rates[1] >= rates[2]


# ----------------------------------------------------------- permutation


def _paired(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return paired_study("p", rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))


def test_permutation_preserves_pairs():
    d = _paired()
    p = permute_within_study(d, 3)
    _, y0, y1, s0, s1 = d.paired_arrays()
    _, q0, q1, t0, t1 = p.paired_arrays()
    assert Counter(zip(y0, y1)) == Counter(zip(q0, q1))
    np.testing.assert_array_equal(s0, t0)
    np.testing.assert_array_equal(s1, t1)
    assert permute_within_study(d, 3) == p


def test_permutation_single_subject_identity():
    d = _paired(1)
    assert permute_within_study(d, 0) == d


def test_permutation_rejects_two_arm():
    d = two_arm_study("t", [1, 2], [[1], [2]], [0, 1], [[0], [1]])
    with pytest.raises(ValueError):
        permute_within_study(d, 0)
    with pytest.raises(ValueError):
        run_permutation_fpr([d, d], 2)


def test_permutation_fpr_runs_and_validates():
    data = synthetic_paired_studies(3, 20, 15, seed=1)
    s = run_permutation_fpr(data, 5, n_per_study=15, n_studies=2, seed=2)
    assert s.fpr.shape == (5,) and 0 <= s.mean <= s.max <= 1
    assert list(s.to_frame().columns) == ["replicate", "n_per_study", "n_studies", "alpha", "epsilon", "fpr"]
    again = run_permutation_fpr(data, 5, n_per_study=15, n_studies=2, seed=2)
    np.testing.assert_array_equal(s.fpr, again.fpr)
    with pytest.raises(ValueError):
        run_permutation_fpr(data, 2, n_per_study=25)
    with pytest.raises(ValueError):
        run_permutation_fpr(data, 2, n_studies=4)


def test_synthetic_layout():
    from surrmeta.ranks import study_effects

    for d in synthetic_paired_studies(3, 25, 6, seed=5, n_planted=2):
        eff = study_effects(d)
        planted = eff[eff["marker"].str.startswith("planted")]
        assert planted["n"].eq(25).all()
        assert d.markers[:2] == ("planted_0", "planted_1")
