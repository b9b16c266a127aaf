import numpy as np
import pytest
from sklearn.base import clone

from surrmeta.estimators import RandomEffectsMeta, SurrogateScreener, check_studies
from surrmeta.meta import pool_effects
from surrmeta.pipeline import forest_table, power_epsilon, resolve_epsilon, screen
from surrmeta.signature import SIGNATURE
from surrmeta.simulate import synthetic_paired_studies


@pytest.fixture(scope="module")
def studies():
    return synthetic_paired_studies(6, 40, 20, seed=11, n_planted=2, planted_corr=0.999)


def test_screen_selects_planted(studies):
    res = screen(studies, 0.1)
    assert set(res.selected) == {"planted_0", "planted_1"}
    assert list(res.table["p"]) == sorted(res.table["p"])
    assert (res.table["p_adjusted"] >= res.table["p"]).all()
    assert set(res.signature.standardization) == {s.study_id for s in studies}
    assert max(res.signature.lambdas) == 1.0


def test_screen_thread_invariant(studies):
    a = screen(studies, 0.1, threads=1)
    b = screen(studies, 0.1, threads=4)
    assert a.table.equals(b.table)
    assert a.signature == b.signature


def test_screen_needs_two_studies(studies):
    with pytest.raises(ValueError):
        screen(studies[:1], 0.1)
    with pytest.raises(ValueError):
        screen(studies, 0.1, meta_method="bogus")


def test_screen_empty_signature(caplog):
    res = screen(synthetic_paired_studies(4, 30, 10, seed=2), 0.1)
    assert res.signature.is_empty and res.selected == []
    assert "no marker" in caplog.text


def test_forest_table(studies):
    res = screen(studies, 0.1)
    ft = forest_table(res, "planted_0")
    assert list(ft["label"]) == [s.study_id for s in studies] + ["pooled", "prediction"]
    assert ft["weight"].iloc[: len(studies)].sum() == pytest.approx(1.0)


def test_resolve_epsilon(studies):
    eps = resolve_epsilon(studies, ("power", 0.05, 0.80))
    assert eps == power_epsilon(studies) > 0
    with pytest.raises(ValueError):
        resolve_epsilon(studies, -1)


def test_screener_estimator(studies):
    est = SurrogateScreener(epsilon=0.1)
    assert clone(est).get_params() == est.get_params()
    est.fit(studies[:4])
    assert est.selected_ == list(est.signature_.members)
    out = est.transform(studies[4:])
    assert all(d.markers[-1] == SIGNATURE for d in out)
    ev = est.evaluate(studies[4:], n_boot=0)
    assert ev.epsilon == est.epsilon_
    with pytest.raises(TypeError):
        check_studies([1, 2])


def test_random_effects_meta_matches_function():
    d, v = np.array([0.1, 0.3, -0.05, 0.2]), np.array([0.01, 0.02, 0.015, 0.03])
    est = RandomEffectsMeta().fit(d, v)
    ref = pool_effects(d, v)
    assert est.mu_ == ref.mu_hat and est.tau2_ == ref.tau2_hat and est.se_ == ref.se_pooled
    assert est.prediction_interval()[0] <= est.ci_[0]
    assert clone(est).get_params()["method"] == "RE"
