"""Distal outcomes by latent class: BCH correction and comparators.

Two K x K matrices summarize classification quality:

* ``assignment[k][m]``: weighted mean posterior of class m among respondents
  modally assigned to k, i.e. P(C = m | C_hat = k). Its diagonal holds the
  usual per-class assignment accuracies.
* ``D[k][m] = P(C_hat = m | C = k)``, estimated as
  ``sum_{i: C_hat_i = m} w_i p_ik / sum_i w_i p_ik``.

BCH weights are ``W = D^-1``. Respondent i contributes to class k with the
composite weight ``u_ik = w_i W[C_hat_i][k]``, and the corrected mean is
the ratio ``sum_i u_ik z_i / sum_i u_ik``. With this convention the summed
composite weights of class k equal its model-implied size pi_k sum(w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import SurveyDataset
from .lca import PosteriorMatrix


class DistalError(ValueError):
    """Raised when a distal analysis cannot be carried out."""


class ConditioningError(DistalError):
    """The classification error matrix is too ill-conditioned to invert."""


@dataclass(frozen=True)
class ClassificationErrorMatrix:
    D: np.ndarray
    assignment: np.ndarray
    counts: np.ndarray  # unweighted modal-class sizes
    weighted_counts: np.ndarray

    @property
    def K(self) -> int:
        return self.D.shape[0]

    @property
    def accuracies(self) -> np.ndarray:
        return np.diag(self.assignment).copy()

    @property
    def average_diagonal(self) -> float:
        return float(np.mean(np.diag(self.assignment)))


@dataclass(frozen=True)
class BchWeights:
    W: np.ndarray
    condition_number: float


@dataclass(frozen=True)
class PairwiseRow:
    a: int
    b: int
    estimate: float
    se: float
    z: float
    p: float
    p_holm: float
    reject: bool


@dataclass
class DistalResult:
    outcome_id: str
    class_means: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    n_used: int
    class_sizes: np.ndarray = field(default=None)
    wald_chi2: float | None = None
    df: int = 0
    p: float | None = None
    pairwise: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.class_means.size


def _check_weights(weights, n) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(~np.isfinite(w)) or np.any(w < 0):
        raise DistalError("weights must be finite, non-negative and one per respondent")
    return w


def error_matrix(post: PosteriorMatrix, weights) -> ClassificationErrorMatrix:
    """Classification error matrices from posteriors and survey weights."""
    p = post.probs
    n, K = p.shape
    if K < 2:
        raise DistalError("classification error needs K >= 2")
    w = _check_weights(weights, n)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), post.modal] = 1.0
    counts = onehot.sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DistalError(f"class {empty[0] + 1} has no modally assigned respondents")
    wp = p * w[:, None]
    joint = onehot.T @ wp  # joint[c][k] = sum_{i: C_hat = c} w_i p_ik
    wc = onehot.T @ w
    if np.any(wc <= 0):
        raise DistalError("a modal class has zero total weight")
    assignment = joint / wc[:, None]
    D = joint.T / joint.sum(axis=0)[:, None]
    return ClassificationErrorMatrix(D, assignment, counts, wc)


def bch_weights(cem: ClassificationErrorMatrix, max_condition: float = 1e6) -> BchWeights:
    """Invert D, refusing when it is too ill-conditioned to trust."""
    cond = float(np.linalg.cond(cem.D))
    if not np.isfinite(cond) or cond > max_condition:
        raise ConditioningError(
            f"classification error matrix is ill-conditioned (condition number {cond:.3g} > "
            f"{max_condition:.3g}); classes are too poorly separated for BCH"
        )
    return BchWeights(np.linalg.inv(cem.D), cond)


def _outcome(dataset: SurveyDataset, outcome: str) -> np.ndarray:
    item = dataset.item(outcome)
    if item.role != "distal":
        raise DistalError(f"{outcome!r} is not a distal outcome (role {item.role!r})")
    return dataset.column(outcome)


def _ratio_means(z, u):
    """Ratio means per column of u, with influence-function sandwich covariance."""
    tot = u.sum(axis=0)
    if np.any(np.abs(tot) < 1e-12):
        raise DistalError("a class has zero total composite weight")
    mu = (u * z[:, None]).sum(axis=0) / tot
    psi = u * (z[:, None] - mu[None, :]) / tot[None, :]
    return mu, psi.T @ psi, tot


def composite_weights(modal, weights, W) -> np.ndarray:
    """u_ik = w_i W[C_hat_i][k]."""
    return np.asarray(weights, dtype=float)[:, None] * np.asarray(W)[np.asarray(modal)]


def bch_class_means(dataset: SurveyDataset, outcome: str, post: PosteriorMatrix, W, weights=None) -> DistalResult:
    """BCH-corrected class means of one distal outcome.

    Respondents with a missing outcome are dropped for this outcome only.
    """
    W = W.W if isinstance(W, BchWeights) else np.asarray(W, dtype=float)
    w = _check_weights(dataset.weights if weights is None else weights, dataset.n)
    z = _outcome(dataset, outcome)
    keep = ~np.isnan(z)
    if not keep.any():
        raise DistalError(f"{outcome!r} has no observed values")
    u = composite_weights(post.modal[keep], w[keep], W)
    mu, cov, tot = _ratio_means(z[keep], u)
    return DistalResult(outcome, mu, np.sqrt(np.diag(cov)), cov, int(keep.sum()), tot)


def naive_means(dataset: SurveyDataset, outcome: str, modal, weights=None, K: int | None = None) -> DistalResult:
    """Weighted means within modal classes, ignoring classification error."""
    modal = np.asarray(modal, dtype=int)
    w = _check_weights(dataset.weights if weights is None else weights, dataset.n)
    z = _outcome(dataset, outcome)
    keep = ~np.isnan(z)
    K = int(modal.max()) + 1 if K is None else K
    u = composite_weights(modal[keep], w[keep], np.eye(K))
    if np.any(u.sum(axis=0) == 0):
        raise DistalError("a modal class has no members with an observed outcome")
    mu, cov, tot = _ratio_means(z[keep], u)
    return DistalResult(outcome, mu, np.sqrt(np.diag(cov)), cov, int(keep.sum()), tot)


def ml_three_step_means(
    dataset: SurveyDataset,
    outcome: str,
    modal,
    D,
    weights=None,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> np.ndarray:
    """Class means from the ML three-step model with class-conditional normals.

    The modal class is a single indicator with fixed misclassification
    probabilities ``D[k][m] = P(C_hat = m | C = k)``; class shares, means
    and variances are estimated by weighted EM.
    """
    D = D.D if isinstance(D, ClassificationErrorMatrix) else np.asarray(D, dtype=float)
    modal = np.asarray(modal, dtype=int)
    w = _check_weights(dataset.weights if weights is None else weights, dataset.n)
    z = _outcome(dataset, outcome)
    keep = ~np.isnan(z)
    z, modal, w = z[keep], modal[keep], w[keep]
    K = D.shape[0]
    lik_c = D[:, modal].T  # n x K: P(C_hat_i | C = k)

    start = np.zeros((z.size, K))
    start[np.arange(z.size), modal] = 1.0
    post = start
    prev = -np.inf
    for it in range(max_iter):
        wp = post * w[:, None]
        tot = wp.sum(axis=0)
        if np.any(tot <= 0):
            raise DistalError("ML three-step: a class lost all weight")
        pi = tot / tot.sum()
        mu = (wp * z[:, None]).sum(axis=0) / tot
        var = (wp * (z[:, None] - mu) ** 2).sum(axis=0) / tot
        var = np.maximum(var, 1e-12 * max(1.0, float(np.var(z))))
        with np.errstate(divide="ignore"):
            logf = (np.log(pi) + np.log(lik_c) - 0.5 * np.log(2 * math.pi * var)
                    - 0.5 * (z[:, None] - mu) ** 2 / var)
        m = logf.max(axis=1, keepdims=True)
        e = np.exp(logf - m)
        s = e.sum(axis=1, keepdims=True)
        ll = float(np.sum(w * (m[:, 0] + np.log(s[:, 0]))))
        post = e / s
        if abs(ll - prev) <= tol * (abs(ll) + 1.0):
            return mu
        prev = ll
    raise DistalError("ML three-step EM did not converge")


def successive_differences(K: int) -> np.ndarray:
    """(K-1) x K contrast with rows e_k - e_{k+1}."""
    C = np.zeros((K - 1, K))
    idx = np.arange(K - 1)
    C[idx, idx] = 1.0
    C[idx, idx + 1] = -1.0
    return C


def wald_equality_test(result: DistalResult, contrast=None) -> tuple[float | None, int, float | None]:
    """Wald chi-square for equal class means; p is None if the contrast covariance is singular."""
    K = result.K
    C = successive_differences(K) if contrast is None else np.asarray(contrast, dtype=float)
    df = C.shape[0]
    d = C @ result.class_means
    V = C @ result.cov @ C.T
    if np.linalg.matrix_rank(V) < df:
        return None, df, None
    chi2 = float(d @ np.linalg.solve(V, d))
    chi2 = max(chi2, 0.0)
    return chi2, df, float(stats.chi2.sf(chi2, df))


def holm(pvalues, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down: (reject flags, adjusted p) in the input order."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for rank, idx in enumerate(order):
        if p[idx] <= alpha / (m - rank):
            reject[idx] = True
        else:
            break
    adj_sorted = np.maximum.accumulate(np.minimum(1.0, (m - np.arange(m)) * p[order]))
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return reject, adjusted


def pairwise_holm(result: DistalResult, alpha: float = 0.05) -> list:
    """z-tests for all class pairs with Holm-adjusted decisions."""
    K = result.K
    mu, cov = result.class_means, result.cov
    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    est, se, zs, ps = [], [], [], []
    for a, b in pairs:
        e = float(mu[a] - mu[b])
        v = float(cov[a, a] + cov[b, b] - 2 * cov[a, b])
        s = math.sqrt(v) if v > 0 else 0.0
        if s > 0:
            z = e / s
            p = float(2 * stats.norm.sf(abs(z)))
        else:
            z = 0.0 if e == 0 else math.copysign(math.inf, e)
            p = 1.0 if e == 0 else 0.0
        est.append(e)
        se.append(s)
        zs.append(z)
        ps.append(p)
    reject, adjusted = holm(ps, alpha)
    return [PairwiseRow(a, b, est[i], se[i], zs[i], ps[i], float(adjusted[i]), bool(reject[i]))
            for i, (a, b) in enumerate(pairs)]


def analyze_outcome(
    dataset: SurveyDataset,
    outcome: str,
    post: PosteriorMatrix,
    W,
    alpha: float = 0.05,
    weights=None,
) -> DistalResult:
    """BCH means, omnibus Wald test and Holm pairwise contrasts for one outcome."""
    res = bch_class_means(dataset, outcome, post, W, weights)
    res.wald_chi2, res.df, res.p = wald_equality_test(res)
    res.pairwise = pairwise_holm(res, alpha)
    return res
