"""Stability checks for a chosen latent class solution.

Four checks: leave-one-indicator-out refits, a comparison of distal
estimators, configural invariance across two subgroups via Tucker's
congruence, and sensitivity of the optimum to the number of random starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._align import optimal_matching, phi_matrix
from .dataset import DataError, SurveyDataset
from .distal import (bch_class_means, bch_weights, error_matrix, ml_three_step_means,
                     naive_means)
from .lca import EmConfig, LcaModel, fit_lca, posteriors


@dataclass(frozen=True)
class RobustnessConfig:
    em: EmConfig = field(default_factory=EmConfig)
    loo_threshold: float = 0.10
    class_floor: float = 0.05
    phi_threshold: float = 0.85
    phi_statistic: str = "mean"
    start_counts: tuple = (50, 100, 200, 500, 1000)
    start_tol: float = 1e-3
    max_condition: float = 1e6

    def __post_init__(self):
        if self.phi_statistic not in ("mean", "min"):
            raise ValueError("phi_statistic must be 'mean' or 'min'")


@dataclass(frozen=True)
class LooRow:
    omitted: str
    max_abs_dpi: float
    recovered: bool
    converged: bool
    prevalences: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Congruence:
    matching: np.ndarray  # class k of a matches class matching[k] of b
    phi: np.ndarray  # per class of a
    min_phi: float
    mean_phi: float


@dataclass(frozen=True)
class InvarianceRow:
    covariate: str
    groups: tuple
    n: tuple
    congruence: Congruence
    passed: bool


@dataclass(frozen=True)
class StartRow:
    n_starts: int
    loglik: float  # best loglik of this run
    best_so_far: float  # best over the nested start sets up to this count
    candidate_range: float  # spread of converged candidate solutions in this run


@dataclass(frozen=True)
class StartStability:
    rows: tuple
    range_best: float
    range_raw: float
    passed: bool


@dataclass(frozen=True)
class EstimatorRow:
    outcome: str
    naive_gap: float
    ml3_gap: float
    bch: np.ndarray = field(repr=False)
    naive: np.ndarray = field(repr=False)
    ml3: np.ndarray = field(repr=False)
    bch_se: np.ndarray = field(repr=False)

    @property
    def equivalent(self) -> bool:
        # ML three-step within two BCH standard errors in every class
        return bool(np.all(np.abs(self.ml3 - self.bch) <= 2 * self.bch_se))


@dataclass(frozen=True)
class EstimatorCheck:
    rows: tuple
    max_attenuation: float
    max_ml3_gap: float
    passed: bool


@dataclass
class RobustnessReport:
    loo: list | None = None
    estimator_check: EstimatorCheck | None = None
    invariance: InvarianceRow | None = None
    start_stability: StartStability | None = None
    verdicts: dict = field(default_factory=dict)


def congruence(model_a: LcaModel, model_b: LcaModel) -> Congruence:
    """Tucker's phi between optimally matched classes of two models."""
    if model_a.K != model_b.K:
        raise ValueError(f"K mismatch: {model_a.K} vs {model_b.K}")
    if list(model_a.item_ids) != list(model_b.item_ids) or model_a.cardinalities != model_b.cardinalities:
        raise ValueError("models are defined on different items")
    phi = phi_matrix(model_a.profiles(), model_b.profiles())
    perm = optimal_matching(phi)
    matched = phi[np.arange(model_a.K), perm]
    return Congruence(perm, matched, float(matched.min()), float(matched.mean()))


def _drop_item(model: LcaModel, item: str) -> LcaModel:
    keep = [j for j, i in enumerate(model.item_ids) if i != item]
    return LcaModel(model.K, model.prevalences, [model.item_probs[j] for j in keep],
                    tuple(model.item_ids[j] for j in keep), model.loglik, model.n_params)


def leave_one_out(
    dataset: SurveyDataset,
    model: LcaModel,
    config: RobustnessConfig | None = None,
    seed: int = 0,
) -> list:
    """Refit without each indicator in turn and compare prevalences.

    Classes of each refit are matched to ``model`` by congruence on the
    remaining items.
    """
    cfg = config or RobustnessConfig()
    items = list(model.item_ids)
    if len(items) < 3:
        raise DataError("leave-one-out needs at least three indicators")
    rows = []
    for item in items:
        rest = [i for i in items if i != item]
        fit = fit_lca(dataset, model.K, cfg.em, seed=seed, items=rest)
        ref = _drop_item(model, item)
        if model.K > 1:
            fit = fit.permuted(congruence(ref, fit).matching)
        dpi = float(np.max(np.abs(fit.prevalences - model.prevalences)))
        rec = bool(fit.converged and np.all(fit.prevalences >= cfg.class_floor))
        rows.append(LooRow(item, dpi, rec, fit.converged, fit.prevalences.copy()))
    return rows


def subgroup_invariance(
    dataset: SurveyDataset,
    covariate: str,
    K: int,
    config: RobustnessConfig | None = None,
    groups: Sequence | None = None,
    seed: int = 0,
) -> InvarianceRow:
    """Fit K classes separately in two subgroups and compare profiles."""
    cfg = config or RobustnessConfig()
    col = dataset.column(covariate)
    if groups is None:
        codes = np.unique(col[~np.isnan(col)])
        if codes.size != 2:
            raise DataError(f"{covariate!r} has {codes.size} levels; pass the two groups to compare")
        groups = tuple(codes.tolist())
    if len(groups) != 2:
        raise ValueError("exactly two groups are compared")
    fits, sizes = [], []
    for g in groups:
        sub = dataset.subset(col == g)
        if sub.n < 10 * K:
            raise DataError(f"subgroup {covariate}={g} has only {sub.n} respondents")
        fits.append(fit_lca(sub, K, cfg.em, seed=seed))
        sizes.append(sub.n)
    c = congruence(fits[0], fits[1])
    stat = c.mean_phi if cfg.phi_statistic == "mean" else c.min_phi
    return InvarianceRow(covariate, tuple(groups), tuple(sizes), c, bool(stat >= cfg.phi_threshold))


def start_stability(
    dataset: SurveyDataset,
    K: int,
    start_counts: Sequence[int] | None = None,
    config: RobustnessConfig | None = None,
    seed: int = 0,
) -> StartStability:
    """Best log-likelihood as the number of random starts grows.

    All runs share ``seed``, so the start set of a smaller count is a
    prefix of every larger one. ``best_so_far`` is the best solution over
    the union of those nested sets and cannot decrease; ``loglik`` is what
    each run alone returned.
    """
    cfg = config or RobustnessConfig()
    counts = list(cfg.start_counts if start_counts is None else start_counts)
    if counts != sorted(counts) or len(set(counts)) != len(counts):
        raise ValueError("start counts must be strictly ascending")
    rows = []
    best = -np.inf
    for c in counts:
        em = replace(cfg.em, n_starts=c, n_best=min(cfg.em.n_best, c))
        m = fit_lca(dataset, K, em, seed=seed)
        best = max(best, m.loglik)
        cand = m.candidate_loglik if m.candidate_loglik is not None and m.candidate_loglik.size else np.array([m.loglik])
        rows.append(StartRow(c, m.loglik, best, float(np.ptp(cand))))
    raw = [r.loglik for r in rows]
    range_best = float(rows[-1].best_so_far - rows[0].best_so_far)
    return StartStability(tuple(rows), range_best, float(max(raw) - min(raw)),
                          bool(max(raw) - min(raw) <= cfg.start_tol))


def estimator_check(
    dataset: SurveyDataset,
    outcomes: Sequence[str],
    model: LcaModel,
    config: RobustnessConfig | None = None,
) -> EstimatorCheck:
    """BCH against naive modal-class means and the ML three-step estimator."""
    cfg = config or RobustnessConfig()
    post = posteriors(model, dataset)
    cem = error_matrix(post, dataset.weights)
    W = bch_weights(cem, cfg.max_condition)
    rows = []
    for z in outcomes:
        b = bch_class_means(dataset, z, post, W)
        nv = naive_means(dataset, z, post.modal, K=model.K)
        ml = ml_three_step_means(dataset, z, post.modal, cem)
        rows.append(EstimatorRow(z, float(np.max(np.abs(nv.class_means - b.class_means))),
                                 float(np.max(np.abs(ml - b.class_means))),
                                 b.class_means, nv.class_means, ml, b.se))
    if not rows:
        raise ValueError("no outcomes to check")
    return EstimatorCheck(tuple(rows), max(r.naive_gap for r in rows), max(r.ml3_gap for r in rows),
                          all(r.equivalent for r in rows))


def run_all(
    dataset: SurveyDataset,
    model: LcaModel,
    config: RobustnessConfig | None = None,
    outcomes: Sequence[str] = (),
    split: str | None = None,
    groups: Sequence | None = None,
    seed: int = 0,
    checks: Sequence[str] = ("loo", "estimator", "invariance", "starts"),
) -> RobustnessReport:
    """Run the requested checks and collect pass/fail verdicts."""
    cfg = config or RobustnessConfig()
    rep = RobustnessReport()
    if "loo" in checks:
        rep.loo = leave_one_out(dataset, model, cfg, seed=seed)
        rep.verdicts["loo"] = all(r.recovered and r.max_abs_dpi < cfg.loo_threshold for r in rep.loo)
    if "estimator" in checks and outcomes:
        rep.estimator_check = estimator_check(dataset, outcomes, model, cfg)
        rep.verdicts["estimator"] = rep.estimator_check.passed
    if "invariance" in checks and split is not None:
        rep.invariance = subgroup_invariance(dataset, split, model.K, cfg, groups, seed=seed)
        rep.verdicts["invariance"] = rep.invariance.passed
    if "starts" in checks:
        rep.start_stability = start_stability(dataset, model.K, None, cfg, seed=seed)
        rep.verdicts["starts"] = rep.start_stability.passed
    return rep
