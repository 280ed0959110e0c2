"""Class enumeration: information criteria, BLRT, VLMR-LRT and the K rule.

The VLMR test follows Lo, Mendell & Rubin (2001, Biometrika 88:767-778):
the likelihood-ratio statistic 2(l_K - l_{K-1}) is referred to Vuong's
weighted sum of chi-square(1) variables, with weights equal to the
eigenvalues of

    [[ B_f A_f^-1, -B_fg A_g^-1],
     [ B_gf A_f^-1, -B_g A_g^-1]]

where A is the negative weighted Hessian and B the outer product of
weighted per-respondent scores (f: K classes, g: K-1 classes), evaluated
at the estimates. The ad hoc small-sample adjustment divides the statistic
by 1 + 1 / ((p_K - p_{K-1}) ln n). Tail probabilities of the weighted
chi-square sum use Imhof's (1961) inversion formula.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import integrate, stats

from .dataset import SurveyDataset
from .lca import (EmConfig, EstimationError, LcaModel, fit_lca, posteriors,
                  reported_entropy, score_and_hessian)
from .simulate import sample_from_model, split_starts


@dataclass(frozen=True)
class SelectionConfig:
    em: EmConfig = field(default_factory=EmConfig)
    blrt_reps: int = 199
    blrt_starts: int = 20
    blrt_best: int = 5
    blrt_policy: str = "all"
    alpha: float = 0.05
    entropy_min: float = 0.80
    min_class_share: float = 0.05
    elbow_fraction: float = 0.70
    max_fail_share: float = 0.10
    n_jobs: int = 1
    blrt_early_stop: bool = True
    blrt_block: int = 10

    def __post_init__(self):
        if self.blrt_policy not in ("all", "sequential", "needed", "none"):
            raise ValueError(f"unknown blrt_policy {self.blrt_policy!r}")
        if self.blrt_reps < 1:
            raise ValueError("blrt_reps must be positive")


@dataclass
class FitRow:
    K: int
    loglik: float
    n_params: int
    bic: float
    sabic: float
    aic: float
    entropy: float
    blrt_p: float | None
    vlmr_p: float | None
    min_class_share: float
    converged: bool = True
    vlmr_stat: float | None = None
    blrt_failed: int = 0
    blrt_reps_used: int | None = None


@dataclass
class EnumerationTable:
    rows: list
    recommended_K: int | None
    rationale: list
    n: int
    models: dict = field(default_factory=dict, repr=False)

    def row(self, K: int) -> FitRow:
        for r in self.rows:
            if r.K == K:
                return r
        raise KeyError(K)


def information_criteria(loglik: float, n_params: int, n: int) -> tuple[float, float, float]:
    """(BIC, SABIC, AIC) with n the unweighted analytic sample size."""
    if n < 2:
        raise ValueError("n must be >= 2")
    bic = -2.0 * loglik + n_params * math.log(n)
    sabic = -2.0 * loglik + n_params * math.log((n + 2) / 24.0)
    aic = -2.0 * loglik + 2.0 * n_params
    return bic, sabic, aic


# --------------------------------------------------------------------------
# weighted chi-square tail


def weighted_chi2_sf(x: float, weights) -> float:
    """P(sum_i lambda_i Z_i^2 > x) for independent standard normal Z_i.

    Imhof's formula; negative weights are allowed.
    """
    lam = np.asarray(weights, dtype=float).ravel()
    if lam.size == 0:
        return 1.0 if x < 0 else 0.0
    scale = np.max(np.abs(lam))
    if scale == 0:
        return 1.0 if x < 0 else 0.0
    lam = lam[np.abs(lam) > 1e-10 * scale] / scale
    xs = x / scale
    if np.all(np.abs(lam - lam[0]) < 1e-12):
        # common weight: a scaled chi-square with lam.size degrees of freedom
        if lam[0] > 0:
            return float(stats.chi2.sf(xs / lam[0], lam.size))
        return float(stats.chi2.cdf(xs / lam[0], lam.size))

    def integrand(u):
        theta = 0.5 * np.sum(np.arctan(lam * u)) - 0.5 * xs * u
        rho = np.exp(0.25 * np.sum(np.log1p((lam * u) ** 2)))
        return math.sin(theta) / (u * rho)

    def envelope(u):
        return 1.0 / (u * np.exp(0.25 * np.sum(np.log1p((lam * u) ** 2))))

    # integrate over doubling panels until the integrand envelope is negligible
    total, a, width = 0.0, 0.0, 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for _ in range(80):
            val, _ = integrate.quad(integrand, a, a + width, limit=200)
            total += val
            a += width
            if envelope(a) * a < 1e-11:
                break
            width *= 2.0
        else:
            val, _ = integrate.quad(integrand, a, np.inf, limit=1000)
            total += val
    return float(min(1.0, max(0.0, 0.5 + total / math.pi)))


@dataclass(frozen=True)
class VlmrResult:
    lr: float
    statistic: float
    p: float
    eigenvalues: np.ndarray = field(repr=False)


def vlmr_lrt(model_k: LcaModel, model_km1: LcaModel, dataset: SurveyDataset) -> VlmrResult:
    """Lo-Mendell-Rubin adjusted LRT of K-1 against K classes."""
    if model_k.K != model_km1.K + 1:
        raise ValueError("models must differ by exactly one class")
    lr = 2.0 * (model_k.loglik - model_km1.loglik)
    slack = 1e-8 * (abs(model_k.loglik) + 1.0)
    if lr < -slack:
        raise EstimationError(
            f"K={model_k.K} log-likelihood is below the K={model_km1.K} solution; "
            "increase the number of random starts"
        )
    if lr <= slack:
        return VlmrResult(0.0, 0.0, 1.0, np.zeros(0))
    n = dataset.n
    dp = model_k.n_params - model_km1.n_params
    adj = lr / (1.0 + 1.0 / (dp * math.log(n)))

    w = dataset.weights
    s_f, h_f = score_and_hessian(model_k, dataset)
    s_g, h_g = score_and_hessian(model_km1, dataset)
    ainv_f = np.linalg.pinv(-h_f, hermitian=True)
    ainv_g = np.linalg.pinv(-h_g, hermitian=True)
    wf, wg = s_f * w[:, None], s_g * w[:, None]
    b_f, b_g, b_fg = wf.T @ wf, wg.T @ wg, wf.T @ wg
    top = np.hstack([b_f @ ainv_f, -b_fg @ ainv_g])
    bottom = np.hstack([b_fg.T @ ainv_f, -b_g @ ainv_g])
    lam = np.linalg.eigvals(np.vstack([top, bottom])).real
    return VlmrResult(lr, adj, weighted_chi2_sf(adj, lam), lam)


# --------------------------------------------------------------------------
# parametric bootstrap LRT


@dataclass(frozen=True)
class BlrtResult:
    statistic: float
    p: float
    replicate_stats: np.ndarray
    n_failed: int
    reps: int
    stopped_early: bool = False


def _replicate_fit(dataset, K, cfg: EmConfig, seed, init):
    model = fit_lca(dataset, K, cfg, seed=seed, init=init, canonical=False)
    if not model.converged:
        model = fit_lca(dataset, K, cfg, seed=seed + 1_000_003, init=init, canonical=False)
    return model


def _blrt_replicate(model_km1: LcaModel, n: int, K: int, cfg: EmConfig, seed: int, b: int):
    ss = np.random.SeedSequence(seed, spawn_key=(104729, K, b))
    rng = np.random.default_rng(ss)
    data = sample_from_model(model_km1, n, rng)
    fit_seed = int(ss.generate_state(1)[0])
    null = _replicate_fit(data, K - 1, cfg, fit_seed, [model_km1] if K - 1 > 1 else [])
    if not null.converged:
        return math.nan
    splits = split_starts(null, rng)
    alt = _replicate_fit(data, K, cfg, fit_seed, splits)
    if not alt.converged:
        return math.nan
    return 2.0 * (alt.loglik - null.loglik)


def blrt(
    dataset: SurveyDataset,
    K: int,
    config: SelectionConfig | None = None,
    seed: int = 0,
    model_k: LcaModel | None = None,
    model_km1: LcaModel | None = None,
) -> BlrtResult:
    """Bootstrap LRT of K-1 against K classes.

    Replicate data sets of size n are drawn from the fitted K-1 model with
    uniform weights; the observed statistic is put on the same scale by
    rescaling weights to sum to n. ``p = (1 + #{T_b >= T}) / (B + 1)`` over
    the B replicates that converged.

    With ``blrt_early_stop`` replicates run in fixed blocks and stop as soon
    as the exceedance count rules out ``p < alpha``; the reported p then
    uses the replicates drawn so far and is still >= alpha, so the decision
    matches the full run.
    """
    cfg = config or SelectionConfig()
    if K < 2:
        raise ValueError("BLRT needs K >= 2")
    em = cfg.em
    if model_km1 is None:
        model_km1 = fit_lca(dataset, K - 1, em, seed=seed)
    if model_k is None:
        model_k = fit_lca(dataset, K, em, seed=seed)
    n = dataset.n
    scale = n / float(np.sum(dataset.weights))
    T = 2.0 * (model_k.loglik - model_km1.loglik) * scale
    rep_cfg = replace(em, n_starts=cfg.blrt_starts, n_best=min(cfg.blrt_best, max(cfg.blrt_starts, 1)))
    tol = 1e-9 * (abs(T) + 1)
    # p < alpha is impossible once 1 + #exceedances >= alpha (B + 1)
    cap = cfg.alpha * (cfg.blrt_reps + 1) - 1.0
    block = cfg.blrt_block if cfg.blrt_early_stop else cfg.blrt_reps
    stats: list = []
    stopped = False
    with Parallel(n_jobs=cfg.n_jobs) as pool:
        while len(stats) < cfg.blrt_reps and not stopped:
            ids = range(len(stats), min(len(stats) + block, cfg.blrt_reps))
            stats.extend(pool(delayed(_blrt_replicate)(model_km1, n, K, rep_cfg, seed, b) for b in ids))
            if cfg.blrt_early_stop:
                hits = np.cumsum(np.nan_to_num(np.array(stats) >= T - tol, nan=0.0))
                over = np.flatnonzero((hits >= cap) & (hits >= 1))
                if over.size and len(stats) < cfg.blrt_reps:
                    del stats[over[0] + 1:]
                    stopped = True
    stats = np.array(stats, dtype=float)
    failed = int(np.isnan(stats).sum())
    if failed > cfg.max_fail_share * stats.size:
        raise EstimationError(f"BLRT: {failed} of {stats.size} replicates failed")
    ok = stats[~np.isnan(stats)]
    p = (1.0 + np.sum(ok >= T - tol)) / (ok.size + 1.0)
    return BlrtResult(T, float(min(1.0, p)), stats, failed, int(stats.size), stopped)


# --------------------------------------------------------------------------
# enumeration


def _elbow(bics: dict, K: int, fraction: float):
    """Ratio of BIC decrements (K -> K+1) / (K-1 -> K) and its verdict."""
    if K - 1 not in bics or K + 1 not in bics:
        return None, None, None, False
    prev = bics[K - 1] - bics[K]
    nxt = bics[K] - bics[K + 1]
    if prev <= 0:
        return prev, nxt, None, False
    ratio = nxt / prev
    return prev, nxt, ratio, ratio < fraction


def recommend(rows: list, config: SelectionConfig) -> tuple[int | None, list]:
    """Apply the triangulation rule to filled fit rows.

    Sequential tests set an upper bound: K_seq is the largest K such that
    BLRT and VLMR are significant for every step 2..K. The recommendation is
    the largest K <= K_seq that also has entropy >= entropy_min, every class
    above min_class_share and a BIC elbow. With K_seq = 1 the one-class model
    is recommended.
    """
    by_k = {r.K: r for r in rows}
    bics = {r.K: r.bic for r in rows}
    a = config.alpha
    rationale = []
    k_seq = 1
    chain = True
    for r in sorted(rows, key=lambda r: r.K):
        entry = {"K": r.K}
        if r.K == 1:
            entry["admissible"] = None
            rationale.append(entry)
            continue
        blrt_ok = r.blrt_p is not None and r.blrt_p < a
        vlmr_ok = r.vlmr_p is not None and r.vlmr_p < a
        if config.blrt_policy == "none":
            blrt_ok = True
        prev, nxt, ratio, elbow_ok = _elbow(bics, r.K, config.elbow_fraction)
        entry.update(
            entropy=r.entropy,
            entropy_ok=r.entropy >= config.entropy_min,
            min_class_share=r.min_class_share,
            share_ok=r.min_class_share >= config.min_class_share,
            blrt_p=r.blrt_p,
            blrt_ok=blrt_ok,
            vlmr_p=r.vlmr_p,
            vlmr_ok=vlmr_ok,
            bic_decrement_in=prev,
            bic_decrement_out=nxt,
            elbow_ratio=ratio,
            elbow_ok=elbow_ok,
        )
        entry["admissible"] = bool(entry["entropy_ok"] and entry["share_ok"] and blrt_ok and vlmr_ok and elbow_ok)
        if chain and blrt_ok and vlmr_ok:
            k_seq = r.K
        else:
            chain = False
        rationale.append(entry)

    summary = {"K_seq": k_seq}
    candidates = [e["K"] for e in rationale if e.get("admissible") and e["K"] <= k_seq]
    if k_seq == 1:
        rec = 1 if 1 in by_k else None
        summary["reason"] = "no significant test for K = 2; one class retained"
    elif candidates:
        rec = max(candidates)
        summary["reason"] = f"largest admissible K within the sequential-test range 2..{k_seq}"
    else:
        rec = None
        summary["reason"] = "no K satisfies all criteria"
    bic_min = min(bics, key=bics.get)
    if rec is not None and bic_min != rec:
        summary["bic_minimum_K"] = bic_min
    others = [k for k in candidates if k != rec]
    if others:
        summary["other_admissible_K"] = others
    rationale.append(summary)
    return rec, rationale


def _blrt_horizon(rows: list, cfg: SelectionConfig) -> int:
    """Largest K whose BLRT can still change the recommendation.

    That is the largest K admissible on every criterion other than BLRT,
    capped by the first non-significant VLMR step.
    """
    probe = replace(cfg, blrt_policy="none")
    _, rationale = recommend(rows, probe)
    horizon = 1
    for e in rationale:
        if e.get("K", 0) >= 2 and e.get("admissible") and e["K"] <= rationale[-1]["K_seq"]:
            horizon = max(horizon, e["K"])
    return horizon


def enumerate_classes(
    dataset: SurveyDataset,
    K_max: int,
    config: SelectionConfig | None = None,
    seed: int = 0,
    models: dict | None = None,
) -> EnumerationTable:
    """Fit K = 1..K_max and fill fit rows plus a recommended K.

    Models are fitted in K order; each K uses its own start seeds so rows
    do not depend on which other K values were requested.

    ``blrt_policy`` decides which rows get a BLRT: ``"all"`` (every K),
    ``"sequential"`` (stop after the first non-significant step),
    ``"needed"`` (only K up to the largest K the bootstrap could still
    change, giving the same recommendation as ``"all"``) or ``"none"``.
    """
    cfg = config or SelectionConfig()
    if K_max < 1:
        raise ValueError("K_max must be >= 1")
    n = dataset.n
    models = dict(models or {})
    rows = []
    for K in range(1, K_max + 1):
        if K not in models:
            models[K] = fit_lca(dataset, K, cfg.em, seed=seed)
        m = models[K]
        post = posteriors(m, dataset)
        bic, sabic, aic = information_criteria(m.loglik, m.n_params, n)
        row = FitRow(K, m.loglik, m.n_params, bic, sabic, aic, reported_entropy(post), None, None,
                     float(m.prevalences.min()), m.converged)
        if K >= 2:
            v = vlmr_lrt(m, models[K - 1], dataset)
            row.vlmr_p, row.vlmr_stat = v.p, v.statistic
        rows.append(row)

    if cfg.blrt_policy == "none":
        todo = []
    elif cfg.blrt_policy == "needed":
        todo = list(range(2, _blrt_horizon(rows, cfg) + 1))
    else:
        todo = list(range(2, K_max + 1))
    for K in todo:
        row = rows[K - 1]
        b = blrt(dataset, K, cfg, seed=seed, model_k=models[K], model_km1=models[K - 1])
        row.blrt_p, row.blrt_failed, row.blrt_reps_used = b.p, b.n_failed, b.reps
        if cfg.blrt_policy in ("sequential", "needed") and not (b.p < cfg.alpha and row.vlmr_p < cfg.alpha):
            break
    rec, rationale = recommend(rows, cfg)
    return EnumerationTable(rows, rec, rationale, n, models)
