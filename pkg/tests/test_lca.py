import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FAST_EM, make_dataset
from wlca.lca import (EmConfig, EstimationError, LcaModel, PosteriorMatrix, bivariate_residuals,
                      bootstrap_prevalence_ci, count_parameters, entropy, fit_lca, loglik, posteriors,
                      reported_entropy)
from wlca.simulate import GeneratorSpec, brute_force_loglik, generate, recovery_error

SURVEY_CARDS = [5] * 6 + [3] * 3


@pytest.mark.parametrize("K, expected", [(1, 30), (2, 61), (3, 92), (4, 123), (5, 154), (6, 185), (7, 216)])
def test_count_parameters_survey_items(K, expected):
    assert count_parameters(K, SURVEY_CARDS) == expected


def test_count_parameters_single_binary():
    assert count_parameters(1, [2]) == 1


def test_one_class_is_weighted_marginals(rng):
    codes = rng.integers(1, 4, (200, 2))
    w = rng.lognormal(0, 0.5, 200)
    d = make_dataset(codes, [3, 3], w)
    m = fit_lca(d, 1, FAST_EM)
    for j in range(2):
        freq = np.bincount(codes[:, j] - 1, weights=w, minlength=3) / w.sum()
        np.testing.assert_allclose(m.item_probs[j][:, 0], freq, atol=1e-12)
    assert m.prevalences.tolist() == [1.0]
    assert m.loglik == pytest.approx(brute_force_loglik(m, d), rel=1e-12)


def test_posterior_bayes_rule_by_hand():
    m = LcaModel(2, np.array([0.5, 0.5]), [np.array([[0.9, 0.1], [0.1, 0.9]])], ("y1",), 0.0, 3)
    post = posteriors(m, make_dataset([[1]], [2]))
    np.testing.assert_allclose(post.probs[0], [0.9, 0.1], atol=1e-14)


def test_posteriors_one_class():
    m = LcaModel(1, np.ones(1), [np.array([[0.3], [0.7]])], ("y1",), 0.0, 1)
    post = posteriors(m, make_dataset([[1], [2]], [2]))
    assert np.all(post.probs == 1.0)


def test_posteriors_match_direct_enumeration(rng):
    K, cards = 3, [2, 3, 2]
    pi = rng.dirichlet(np.ones(K))
    probs = [rng.dirichlet(np.ones(r), size=K).T for r in cards]
    m = LcaModel(K, pi, probs, ("y1", "y2", "y3"), 0.0, count_parameters(K, cards))
    codes = np.column_stack([rng.integers(1, r + 1, 20) for r in cards])
    post = posteriors(m, make_dataset(codes, cards))
    for i in range(20):
        joint = np.array([pi[k] * np.prod([probs[j][codes[i, j] - 1, k] for j in range(3)]) for k in range(K)])
        np.testing.assert_allclose(post.probs[i], joint / joint.sum(), rtol=1e-12)
    np.testing.assert_allclose(post.probs.sum(axis=1), 1.0, atol=1e-12)


def test_modal_ties_go_to_lowest_index():
    post = PosteriorMatrix.from_probs(np.array([[0.5, 0.5], [0.2, 0.8], [1 / 3, 1 / 3]]) / [[1], [1], [2 / 3]])
    assert post.modal.tolist() == [0, 1, 0]


def test_entropy_bounds():
    crisp = PosteriorMatrix.from_probs(np.eye(3)[[0, 1, 2, 2]])
    flat = PosteriorMatrix.from_probs(np.full((5, 4), 0.25))
    assert entropy(crisp) == pytest.approx(1.0)
    assert entropy(flat) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        entropy(PosteriorMatrix.from_probs(np.ones((3, 1))))
    assert reported_entropy(PosteriorMatrix.from_probs(np.ones((3, 1)))) == 1.0


def _random_instance(seed):
    r = np.random.default_rng(seed)
    K = int(r.integers(2, 4))
    J = int(r.integers(2, 5))
    cards = [int(r.integers(2, 4)) for _ in range(J)]
    spec = GeneratorSpec(K, r.dirichlet(np.full(K, 3.0)), [r.dirichlet(np.ones(c), size=K).T for c in cards],
                         int(r.integers(30, 201)), weight_law="lognormal", seed=seed)
    return K, generate(spec)[0]


@pytest.mark.parametrize("seed", range(8))
def test_fit_matches_brute_force_and_is_monotone(seed):
    K, d = _random_instance(seed)
    m = fit_lca(d, K, EmConfig(n_starts=10, n_best=3), seed=seed)
    assert m.loglik == pytest.approx(brute_force_loglik(m, d), rel=1e-10)
    assert m.loglik == pytest.approx(loglik(m, d), rel=1e-12)
    assert np.all(np.diff(m.trace) >= -1e-9)
    assert abs(m.prevalences.sum() - 1) < 1e-10
    for p in m.item_probs:
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-10)


def test_canonical_order_ascending_scores(ai_risk_model):
    s = ai_risk_model.expected_scores()
    assert np.all(np.diff(s) > 0)


def test_permutation_symmetry(ai_risk_small, ai_risk_model):
    data, _ = ai_risk_small
    m = ai_risk_model
    p = m.permuted([2, 0, 3, 1])
    assert loglik(p, data) == pytest.approx(loglik(m, data), rel=1e-12)
    assert entropy(posteriors(p, data)) == pytest.approx(entropy(posteriors(m, data)), rel=1e-12)
    pairs = sorted(zip(m.prevalences, map(tuple, m.profiles())))
    pairs_p = sorted(zip(p.prevalences, map(tuple, p.profiles())))
    assert pairs == pairs_p


def test_weight_scale_invariance(ai_risk_small):
    data, _ = ai_risk_small
    a = fit_lca(data, 3, FAST_EM, seed=5)
    b = fit_lca(data.with_weights(data.weights * 7.5), 3, FAST_EM, seed=5)
    np.testing.assert_allclose(a.prevalences, b.prevalences, atol=1e-6)
    assert b.loglik == pytest.approx(7.5 * a.loglik, rel=1e-9)


def test_fit_is_deterministic(ai_risk_small):
    data, _ = ai_risk_small
    a = fit_lca(data, 3, FAST_EM, seed=9)
    b = fit_lca(data, 3, FAST_EM, seed=9)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.prevalences, b.prevalences)


def test_model_round_trip(ai_risk_model):
    m = LcaModel.from_dict(ai_risk_model.to_dict())
    np.testing.assert_array_equal(m.prevalences, ai_risk_model.prevalences)
    assert m.loglik == ai_risk_model.loglik and m.item_ids == ai_risk_model.item_ids


def test_k_above_maximum():
    d = make_dataset([[1, 2], [2, 1]], [2, 2])
    with pytest.raises(EstimationError):
        fit_lca(d, 3, EmConfig(max_classes=2))


def test_nonconvergence_is_flagged(ai_risk_small):
    data, _ = ai_risk_small
    m = fit_lca(data, 4, EmConfig(n_starts=5, n_best=2, burn_in=2, max_iter=3), seed=0)
    assert not m.converged


def test_recovery_on_ai_risk_data(ai_risk_small, ai_risk_model):
    from wlca.simulate import ai_risk_spec
    d_pi, d_rho = recovery_error(ai_risk_spec().as_model(), ai_risk_model)
    assert d_pi < 0.05 and d_rho < 0.2


def test_bvr_near_one_under_model():
    from wlca.simulate import ai_risk_spec
    spec = ai_risk_spec(n=50_000, seed=2, weight_law="uniform")
    data, _ = generate(spec)
    bvr = bivariate_residuals(spec.as_model(), data)
    vals = np.array([r.bvr for r in bvr.rows])
    assert len(vals) == 36 and np.all(vals >= 0)
    # X^2 against known cell probabilities has rarb-1 df, so the mean of X^2/df sits a little above 1
    assert 0.8 < vals.mean() < 2.0
    assert bvr.n_flagged <= 3


def test_bvr_single_class_independent(rng):
    codes = rng.integers(1, 4, (3000, 3))
    d = make_dataset(codes, [3, 3, 3])
    bvr = bivariate_residuals(fit_lca(d, 1), d)
    assert all(r.bvr < 4 for r in bvr.rows)


def test_bootstrap_one_class_is_degenerate(rng):
    d = make_dataset(rng.integers(1, 3, (50, 2)), [2, 2])
    ci = bootstrap_prevalence_ci(d, 1, FAST_EM, n_boot=5)
    assert ci.lower.tolist() == [1.0] and ci.upper.tolist() == [1.0]


def test_bootstrap_interval_brackets_estimate(ai_risk_small, ai_risk_model):
    data, _ = ai_risk_small
    ci = bootstrap_prevalence_ci(data, 4, FAST_EM, ai_risk_model, n_boot=30, seed=2)
    assert ci.n_failed == 0
    assert np.all(ci.lower <= ai_risk_model.prevalences + 1e-9)
    assert np.all(ci.upper >= ai_risk_model.prevalences - 1e-9)
