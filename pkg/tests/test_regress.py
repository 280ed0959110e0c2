import math
import warnings

import numpy as np
import pytest
from scipy.special import softmax

from wlca.dataset import ItemSchema, SurveyDataset
from wlca.regress import (CovariateSpec, RegressionError, SparseLevelWarning, build_design, fit_mnl,
                          hausman_mcfadden_iia, mcfadden_r2, mnl_loglik, odds_ratios, predicted_profiles,
                          profile_vector, vif)


def covariate_data(rng, n, beta=None, ref=0, K=3, weights=None):
    """gender (1..3), party (1..3), income (1..9 ordinal) with class drawn from an MNL."""
    g = rng.choice([1, 2, 3], n, p=[0.47, 0.48, 0.05])
    party = rng.integers(1, 4, n)
    inc = rng.integers(1, 10, n)
    X = np.column_stack([g == 1, g == 3, party == 2, party == 3, (inc - 5) / 2.0]).astype(float)
    if beta is None:
        beta = np.array([[0.3, 0.5, -0.4, 0.2, 0.0, 0.1], [-0.2, -0.6, 0.1, 0.5, 0.4, -0.2]])
    eta = np.zeros((n, K))
    others = [k for k in range(K) if k != ref]
    eta[:, others] = np.column_stack([np.ones(n), X]) @ beta.T
    p = softmax(eta, axis=1)
    cls = (rng.random(n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    items = (ItemSchema("gender", 3, "covariate"), ItemSchema("party", 3, "covariate"),
             ItemSchema("income", 9, "covariate"))
    w = np.ones(n) if weights is None else weights
    d = SurveyDataset(items, np.column_stack([g, party, inc]).astype(float), w)
    return d, cls


SPECS = [CovariateSpec("gender", reference=2, labels={1: "Male", 2: "Female", 3: "Other"}),
         CovariateSpec("party", reference=1), CovariateSpec("income", "ordinal")]


def test_design_coding(rng):
    d, _ = covariate_data(rng, 2000)
    des = build_design(d, SPECS)
    assert des.columns == ("gender=Male", "gender=Other", "party=2", "party=3", "income")
    assert des.reference_levels == {"gender": 2, "party": 1}
    assert set(np.unique(des.X[:, -1])) <= set(range(1, 10))
    assert des.n_dropped == 0


def test_design_listwise_and_sparse_warning(rng):
    d, _ = covariate_data(rng, 300)
    vals = d.values.copy()
    vals[:15, 2] = np.nan
    d = SurveyDataset(d.items, vals, d.weights)
    with pytest.warns(SparseLevelWarning):
        des = build_design(d, SPECS)
    assert des.n == 285 and des.n_dropped == 15


def test_design_errors(rng):
    d, _ = covariate_data(rng, 100)
    with pytest.raises(RegressionError):
        build_design(d, [])
    with pytest.raises(RegressionError):
        build_design(d, [CovariateSpec("gender", reference=7)])
    const = SurveyDataset((ItemSchema("c", 2, "covariate"),), np.ones((10, 1)), np.ones(10))
    with pytest.raises(RegressionError, match="constant"):
        build_design(const, [CovariateSpec("c", "ordinal")])


def _fit(rng, n=3000, **kw):
    d, cls = covariate_data(rng, n, **kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SparseLevelWarning)
        des = build_design(d, SPECS)
    return des, cls, fit_mnl(des, cls, reference_class=0)


def test_gradient_matches_finite_differences(rng):
    des, cls, _ = _fit(rng, 500)
    w = rng.lognormal(0, 0.4, des.n)
    for _ in range(5):
        theta = rng.normal(0, 0.5, 12)
        ll, g = mnl_loglik(theta, des.X, cls, w, 3, 0)
        h = 1e-5
        fd = np.array([(mnl_loglik(theta + h * e, des.X, cls, w, 3, 0)[0]
                        - mnl_loglik(theta - h * e, des.X, cls, w, 3, 0)[0]) / (2 * h) for e in np.eye(12)])
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-4 * np.abs(g).max())


def test_fit_properties(rng):
    des, cls, m = _fit(rng)
    assert m.grad_norm < 1e-6
    assert m.loglik >= m.null_loglik
    P = m.predict_proba(des.X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
    assert 0 < mcfadden_r2(m) < 1


def test_null_design_probabilities_are_shares(rng):
    n = 400
    cls = rng.integers(0, 3, n)
    z = rng.integers(1, 3, n).astype(float)
    d = SurveyDataset((ItemSchema("z", 2, "covariate"),), z[:, None], rng.lognormal(0, 0.3, n))
    des = build_design(d, [CovariateSpec("z", "ordinal")])
    m = fit_mnl(des, cls)
    # intercepts-only fitted shares: set the slope to zero through the profile at the mean is not exact,
    # so compare the null log-likelihood against weighted shares directly
    shares = np.bincount(cls, weights=d.weights, minlength=3) / d.weights.sum()
    assert m.null_loglik == pytest.approx(np.sum(d.weights * np.log(shares[cls])), rel=1e-12)


def test_weight_scale_invariance(rng):
    d, cls = covariate_data(rng, 1500, weights=rng.lognormal(0, 0.5, 1500))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = fit_mnl(build_design(d, SPECS), cls, reference_class=0)
        b = fit_mnl(build_design(d.with_weights(d.weights * 9.0), SPECS), cls, reference_class=0)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-6)
    np.testing.assert_allclose(a.se, b.se, rtol=1e-5)


def test_reference_class_equivariance(rng):
    des, cls, m0 = _fit(rng)
    m1 = fit_mnl(des, cls, reference_class=1)
    b0 = dict(zip(m0.classes, m0.beta))
    b1 = dict(zip(m1.classes, m1.beta))
    # beta_2|ref0 - beta_1|ref0 = beta_2|ref1
    np.testing.assert_allclose(b0[2] - b0[1], b1[2], atol=1e-6)


def test_default_reference_is_largest_class(rng):
    des, cls, _ = _fit(rng)
    m = fit_mnl(des, cls)
    assert m.reference_class == int(np.argmax(np.bincount(cls)))


def test_odds_ratio_arithmetic(rng):
    des, cls, m = _fit(rng, 800)
    m.beta[0, 0] = 0.0
    m.cov[1, 1] = 0.01
    r = odds_ratios(m).get(m.classes[0], des.columns[0])
    assert (round(r.odds_ratio, 2), round(r.ci_low, 2), round(r.ci_high, 2)) == (1.0, 0.82, 1.22)
    assert r.p == pytest.approx(1.0)
    for row in odds_ratios(m).rows:
        assert 0 < row.ci_low <= row.odds_ratio <= row.ci_high


def test_separation_detected():
    n = 200
    x = np.repeat([1.0, 2.0], n // 2)
    cls = (x == 2).astype(int)
    d = SurveyDataset((ItemSchema("x", 2, "covariate"),), x[:, None], np.ones(n))
    with pytest.raises(RegressionError, match="separation"):
        fit_mnl(build_design(d, [CovariateSpec("x")]), cls)


def test_rank_deficiency_detected(rng):
    d, cls = covariate_data(rng, 300)
    dup = SurveyDataset(d.items + (ItemSchema("inc2", 9, "covariate"),),
                        np.column_stack([d.values, d.values[:, 2]]), d.weights)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        des = build_design(dup, SPECS + [CovariateSpec("inc2", "ordinal")])
    with pytest.raises(RegressionError, match="rank"):
        fit_mnl(des, cls)
    assert math.isinf(vif(des)["income"])


def test_vif_orthogonal_design():
    a = np.tile([1.0, 2.0], 50)
    b = np.repeat([1.0, 2.0], 50)
    d = SurveyDataset((ItemSchema("a", 2, "covariate"), ItemSchema("b", 2, "covariate")),
                      np.column_stack([a, b]), np.ones(100))
    v = vif(build_design(d, [CovariateSpec("a", "ordinal"), CovariateSpec("b", "ordinal")]))
    assert v == pytest.approx({"a": 1.0, "b": 1.0}, abs=1e-12)


def test_iia_saturated_design_has_no_divergence(rng):
    n = 3000
    x = rng.integers(1, 3, n).astype(float)
    cls = rng.integers(0, 3, n)
    d = SurveyDataset((ItemSchema("x", 2, "covariate"),), x[:, None], np.ones(n))
    des = build_design(d, [CovariateSpec("x")])
    m = fit_mnl(des, cls, reference_class=0)
    for r in hausman_mcfadden_iia(m, des, cls):
        assert r.statistic == pytest.approx(0.0, abs=1e-8)
        # chi2.sf has infinite slope at 0 for df = 1, so optimizer noise of 1e-10 moves p by ~1e-5
        assert r.p > 0.9999


def test_iia_needs_three_classes(rng):
    des, cls, _ = _fit(rng, 500)
    two = np.minimum(cls, 1)
    m = fit_mnl(des, two)
    with pytest.raises(RegressionError):
        hausman_mcfadden_iia(m, des, two)


def test_predicted_profiles(rng):
    des, cls, m = _fit(rng, 1500)
    prof = predicted_profiles(m, des, {"ref": {"income": 0.0}, "male_other_party": {"gender": "Male", "party": 3},
                                       "mean": {}})
    for p in prof.values():
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
    eta = np.zeros(3)
    eta[list(m.classes)] = m.alpha
    np.testing.assert_allclose(prof["ref"], softmax(eta), atol=1e-12)
    x = profile_vector(des, {"gender": "Male", "party": 3})
    assert x[:4].tolist() == [1.0, 0.0, 0.0, 1.0]
    assert x[4] == pytest.approx(des.ordinal_means["income"])
    eta = np.zeros(3)
    eta[list(m.classes)] = m.alpha + m.beta @ x
    np.testing.assert_allclose(prof["male_other_party"], softmax(eta), atol=1e-12)
    with pytest.raises(RegressionError):
        profile_vector(des, {"gender": "Robot"})
    with pytest.raises(RegressionError):
        profile_vector(des, {"shoe_size": 3})
