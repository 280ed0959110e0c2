import numpy as np
import pytest

from conftest import FAST_EM
from wlca._align import optimal_matching, phi_matrix, tucker_phi
from wlca.dataset import DataError, ItemSchema, SurveyDataset
from wlca.lca import EmConfig, fit_lca
from wlca.robustness import (RobustnessConfig, congruence, estimator_check, leave_one_out, run_all,
                             start_stability, subgroup_invariance)
from wlca.simulate import GeneratorSpec, generate

CFG = RobustnessConfig(em=FAST_EM, start_counts=(5, 10, 20))


def test_tucker_phi_basics(rng):
    x = rng.random(12)
    y = rng.random(12)
    assert tucker_phi(x, x) == pytest.approx(1.0)
    assert tucker_phi([1, 0, 1, 0], [0, 1, 0, 1]) == 0.0
    assert tucker_phi(x, y) == pytest.approx(tucker_phi(y, x))
    assert tucker_phi(3.0 * x, 0.5 * y) == pytest.approx(tucker_phi(x, y))
    assert tucker_phi(np.zeros(3), x[:3]) == 0.0


def test_phi_matrix_matches_scalar(rng):
    a, b = rng.random((3, 7)), rng.random((3, 7))
    M = phi_matrix(a, b)
    for k in range(3):
        for m in range(3):
            assert M[k, m] == pytest.approx(tucker_phi(a[k], b[m]), abs=1e-12)


def test_optimal_matching_recovers_permutation(rng):
    a = rng.dirichlet(np.ones(8), size=4)
    perm = np.array([2, 0, 3, 1])
    assert optimal_matching(phi_matrix(a, a[perm])).tolist() == np.argsort(perm).tolist()


def test_self_congruence(ai_risk_model):
    c = congruence(ai_risk_model, ai_risk_model)
    assert c.matching.tolist() == [0, 1, 2, 3]
    np.testing.assert_allclose(c.phi, 1.0)
    shuffled = ai_risk_model.permuted([3, 1, 0, 2])
    assert congruence(ai_risk_model, shuffled).min_phi == pytest.approx(1.0)


def test_congruence_rejects_mismatched_models(ai_risk_small, ai_risk_model):
    data, _ = ai_risk_small
    with pytest.raises(ValueError):
        congruence(ai_risk_model, fit_lca(data, 3, FAST_EM))


def _crisp_data(n=1500, seed=0, K=2):
    spec = GeneratorSpec(
        K, np.full(K, 1 / K), [np.eye(3)[:, :K] * 0.94 + 0.02 for _ in range(4)], n,
        weight_law="lognormal", distal_laws={"z": {"means": list(range(K)), "sd": 0.5}},
        covariate_laws={"g": [[0.5, 0.5]] * K}, seed=seed)
    return generate(spec)


def test_leave_one_out_one_class(rng):
    data, _ = _crisp_data()
    m = fit_lca(data, 1, FAST_EM)
    rows = leave_one_out(data, m, CFG)
    assert len(rows) == 4
    assert all(r.max_abs_dpi == 0.0 and r.recovered for r in rows)


def test_leave_one_out_stable_on_separated_classes():
    data, _ = _crisp_data()
    m = fit_lca(data, 2, FAST_EM)
    rows = leave_one_out(data, m, CFG)
    assert [r.omitted for r in rows] == list(m.item_ids)
    assert max(r.max_abs_dpi for r in rows) < 0.03


def test_leave_one_out_needs_three_items(rng):
    data, _ = _crisp_data()
    m = fit_lca(data, 2, FAST_EM, items=["y1", "y2"])
    with pytest.raises(DataError):
        leave_one_out(data, m, CFG)


def test_invariance_identical_subgroups_gives_phi_one():
    base, _ = _crisp_data(n=800)
    vals = np.vstack([base.values, base.values])
    vals[:, base.index("g")] = np.repeat([1.0, 2.0], base.n)
    d = SurveyDataset(base.items, vals, np.tile(base.weights, 2))
    row = subgroup_invariance(d, "g", 2, CFG, seed=4)
    assert row.groups == (1.0, 2.0) and row.n == (800, 800)
    np.testing.assert_allclose(row.congruence.phi, 1.0, atol=1e-12)
    assert row.passed


def test_invariance_group_checks(ai_risk_small):
    data, _ = ai_risk_small
    with pytest.raises(DataError):
        subgroup_invariance(data, "party", 4, CFG)  # three levels, groups not given
    with pytest.raises(ValueError):
        subgroup_invariance(data, "party", 4, CFG, groups=(1, 2, 3))


def test_start_stability_is_monotone_and_reproducible(ai_risk_small):
    data, _ = ai_risk_small
    em = EmConfig(n_starts=5, n_best=3)
    cfg = RobustnessConfig(em=em, start_counts=(3, 6, 12))
    s = start_stability(data, 3, config=cfg, seed=2)
    best = [r.best_so_far for r in s.rows]
    assert best == sorted(best)
    assert [r.n_starts for r in s.rows] == [3, 6, 12]
    assert s.range_best >= 0 and s.range_raw >= 0
    assert s == start_stability(data, 3, config=cfg, seed=2)
    with pytest.raises(ValueError):
        start_stability(data, 3, (10, 5), cfg)


def test_same_seed_same_model(ai_risk_small):
    data, _ = ai_risk_small
    a = fit_lca(data, 3, FAST_EM, seed=9)
    b = fit_lca(data, 3, FAST_EM, seed=9)
    assert a.loglik == b.loglik
    assert all(np.array_equal(x, y) for x, y in zip(a.item_probs, b.item_probs))


def test_estimator_check_on_crisp_classes():
    data, _ = _crisp_data(n=3000, K=3)
    m = fit_lca(data, 3, FAST_EM)
    chk = estimator_check(data, ["z"], m, CFG)
    r = chk.rows[0]
    assert chk.max_attenuation < 0.05
    assert chk.max_ml3_gap < 0.05
    assert r.equivalent and chk.passed
    np.testing.assert_allclose(np.sort(r.bch), [0, 1, 2], atol=0.06)


def test_run_all_collects_verdicts():
    data, _ = _crisp_data(n=1000)
    m = fit_lca(data, 2, FAST_EM)
    rep = run_all(data, m, CFG, outcomes=["z"], split="g", seed=1)
    assert set(rep.verdicts) == {"loo", "estimator", "invariance", "starts"}
    assert rep.verdicts["loo"] and rep.verdicts["estimator"] and rep.verdicts["invariance"]
    only = run_all(data, m, CFG, checks=("loo",))
    assert set(only.verdicts) == {"loo"}


def test_config_validation():
    with pytest.raises(ValueError):
        RobustnessConfig(phi_statistic="median")
