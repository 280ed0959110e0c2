"""Survey-weighted multinomial logit of class membership on covariates.

The model is

    log P(C = k | x) / P(C = ref | x) = alpha_k + beta_k' x,   k != ref,

fitted by weighted pseudo-maximum likelihood. Point estimates come from
L-BFGS-B started at zero and are polished with Newton steps on the analytic
Hessian. The covariance is the sandwich ``H^-1 (sum_i s_i s_i') H^-1`` with
``s_i`` the weighted per-respondent scores, so it does not depend on the
scale of the weights.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from .dataset import SurveyDataset


class RegressionError(ValueError):
    """Raised when a regression cannot be fitted or specified."""


class SparseLevelWarning(UserWarning):
    """A covariate level has little weighted support."""


@dataclass(frozen=True)
class CovariateSpec:
    """How one covariate enters the design.

    ``kind`` is ``"categorical"`` (dummy-coded against ``reference``) or
    ``"ordinal"`` (one numeric column). ``labels`` optionally names codes.
    """

    item_id: str
    kind: str = "categorical"
    reference: int | None = None
    labels: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("categorical", "ordinal"):
            raise RegressionError(f"{self.item_id}: kind must be 'categorical' or 'ordinal'")

    def label(self, code: int) -> str:
        return str(self.labels.get(code, self.labels.get(str(code), code)))

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        labels = {int(k): str(v) for k, v in (d.get("labels") or {}).items()}
        ref = d.get("reference")
        return cls(d["item_id"], d.get("kind", "categorical"), None if ref is None else int(ref), labels)

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "kind": self.kind, "reference": self.reference,
                "labels": {str(k): v for k, v in self.labels.items()}}


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray  # n_used x p, no intercept column
    columns: tuple
    rows: np.ndarray  # dataset row indices kept
    weights: np.ndarray
    reference_levels: dict
    specs: tuple
    levels: dict  # categorical covariate -> non-reference codes in column order
    n_dropped: int
    ordinal_means: dict
    sparse_levels: tuple = ()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def build_design(dataset: SurveyDataset, covariates: Sequence, sparse_threshold: float = 30.0) -> DesignMatrix:
    """Dummy/ordinal coding with listwise deletion over the covariates."""
    specs = tuple(c if isinstance(c, CovariateSpec) else CovariateSpec.from_dict(c) for c in covariates)
    if not specs:
        raise RegressionError("empty design: no covariates given")
    ids = [s.item_id for s in specs]
    if len(set(ids)) != len(ids):
        raise RegressionError("duplicate covariates in design")
    for s in specs:
        dataset.item(s.item_id)  # raises for unknown ids
    raw = np.column_stack([dataset.column(i) for i in ids])
    keep = ~np.isnan(raw).any(axis=1)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise RegressionError("empty design: no respondent has all covariates")
    raw = raw[keep]
    w = dataset.weights[keep]
    cols, names, refs, levels, means, sparse = [], [], {}, {}, {}, []
    for j, s in enumerate(specs):
        v = raw[:, j]
        if s.kind == "ordinal":
            cols.append(v)
            names.append(s.item_id)
            means[s.item_id] = float(np.sum(w * v) / np.sum(w))
            continue
        codes = np.unique(v).astype(int)
        ref = s.reference if s.reference is not None else int(codes[0])
        if ref not in codes:
            raise RegressionError(f"{s.item_id}: reference level {ref} does not occur in the analytic sample")
        refs[s.item_id] = ref
        levels[s.item_id] = tuple(int(c) for c in codes if c != ref)
        for c in codes:
            wc = float(np.sum(w[v == c]))
            if wc < sparse_threshold:
                sparse.append((s.item_id, int(c), wc))
                warnings.warn(f"{s.item_id}={s.label(int(c))}: weighted count {wc:.1f} is below "
                              f"{sparse_threshold:g}", SparseLevelWarning, stacklevel=2)
            if c == ref:
                continue
            cols.append((v == c).astype(float))
            names.append(f"{s.item_id}={s.label(int(c))}")
    X = np.column_stack(cols)
    const = [names[k] for k in range(X.shape[1]) if np.ptp(X[:, k]) == 0]
    if const:
        raise RegressionError(f"constant design column(s): {', '.join(const)}")
    if len(set(names)) != len(names):
        raise RegressionError("design column names are not unique; check covariate labels")
    return DesignMatrix(X, tuple(names), rows, w.copy(), refs, specs, levels,
                        int(dataset.n - rows.size), means, tuple(sparse))


# --------------------------------------------------------------------------
# likelihood pieces


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _etas(theta, Xt, K, ref):
    """n x K linear predictors with the reference column fixed at zero."""
    B = theta.reshape(K - 1, Xt.shape[1])
    eta = np.zeros((Xt.shape[0], K))
    others = [k for k in range(K) if k != ref]
    eta[:, others] = Xt @ B.T
    return eta, others


def _loglik_grad(theta, Xt, Y, w, K, ref):
    eta, others = _etas(theta, Xt, K, ref)
    lse = logsumexp(eta, axis=1)
    ll = float(np.sum(w * (np.sum(Y * eta, axis=1) - lse)))
    P = np.exp(eta - lse[:, None])
    R = (Y - P)[:, others] * w[:, None]
    grad = (R.T @ Xt).ravel()
    return ll, grad, P


def _scores(theta, Xt, Y, w, K, ref):
    """Per-respondent weighted scores, n x (K-1) p."""
    eta, others = _etas(theta, Xt, K, ref)
    P = np.exp(eta - logsumexp(eta, axis=1)[:, None])
    R = (Y - P)[:, others] * w[:, None]
    return (R[:, :, None] * Xt[:, None, :]).reshape(Xt.shape[0], -1)


def _hessian(P, Xt, w, others):
    """Hessian of the weighted log-likelihood (negative definite)."""
    Po = P[:, others]
    m, p = len(others), Xt.shape[1]
    H = np.zeros((m * p, m * p))
    for a in range(m):
        for b in range(a, m):
            c = Po[:, a] * ((a == b) - Po[:, b]) * w
            block = -(Xt * c[:, None]).T @ Xt
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = block
            if a != b:
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = block.T
    return H


def mnl_loglik(theta, X, classes, weights, K, reference_class):
    """Weighted log-likelihood and its analytic gradient at ``theta``."""
    Xt = _with_intercept(np.asarray(X, dtype=float))
    Y = np.eye(K)[np.asarray(classes, dtype=int)]
    ll, g, _ = _loglik_grad(np.asarray(theta, dtype=float), Xt, Y, np.asarray(weights, dtype=float), K, reference_class)
    return ll, g


@dataclass
class MnlModel:
    reference_class: int
    K: int
    columns: tuple
    alpha: np.ndarray  # (K-1,) intercepts for non-reference classes
    beta: np.ndarray  # (K-1, p)
    cov: np.ndarray  # sandwich covariance of theta = [alpha_k, beta_k] per class
    loglik: float
    null_loglik: float
    n_used: int
    grad_norm: float
    classes: tuple  # non-reference class indices in parameter order

    @property
    def theta(self) -> np.ndarray:
        return np.column_stack([self.alpha, self.beta]).ravel()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov)).reshape(self.K - 1, -1)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def predict_proba(self, X) -> np.ndarray:
        Xt = _with_intercept(np.atleast_2d(np.asarray(X, dtype=float)))
        eta, _ = _etas(self.theta, Xt, self.K, self.reference_class)
        return np.exp(eta - logsumexp(eta, axis=1)[:, None])


def fit_mnl(
    design: DesignMatrix,
    classes,
    weights=None,
    reference_class: int | None = None,
    K: int | None = None,
    gtol: float = 1e-6,
    separation_bound: float = 20.0,
) -> MnlModel:
    """Weighted multinomial logit of ``classes`` (0-based, aligned with design rows).

    ``classes`` may be given for all dataset rows (then the design rows are
    selected) or already aligned with the design. The reference class
    defaults to the class with the largest total weight.
    """
    X = design.X
    y = np.asarray(classes, dtype=int)
    if y.size != design.n:
        y = y[design.rows]
    w = design.weights if weights is None else np.asarray(weights, dtype=float)
    if w.size != design.n:
        w = w[design.rows]
    K = int(y.max()) + 1 if K is None else K
    counts = np.bincount(y, weights=w, minlength=K)
    if np.count_nonzero(counts) < 2:
        raise RegressionError("need at least two observed classes")
    if np.any(counts == 0):
        raise RegressionError(f"class {int(np.flatnonzero(counts == 0)[0]) + 1} has no members")
    ref = int(np.argmax(counts)) if reference_class is None else int(reference_class)
    Xt = _with_intercept(X)
    p = Xt.shape[1]
    if np.linalg.matrix_rank(np.sqrt(w)[:, None] * Xt) < p:
        raise RegressionError("design is rank deficient")
    Y = np.eye(K)[y]
    scale = float(np.sum(w))

    def objective(theta):
        ll, g, _ = _loglik_grad(theta, Xt, Y, w, K, ref)
        return -ll / scale, -g / scale

    theta0 = np.zeros((K - 1) * p)
    res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-15})
    theta = res.x
    others = [k for k in range(K) if k != ref]
    for _ in range(50):
        ll, g, P = _loglik_grad(theta, Xt, Y, w, K, ref)
        if np.linalg.norm(g) < gtol:
            break
        H = _hessian(P, Xt, w, others)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise RegressionError("singular Hessian; possible separation") from exc
        t = 1.0
        while t > 1e-8:
            cand = theta - t * step
            if _loglik_grad(cand, Xt, Y, w, K, ref)[0] >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        theta = cand
    ll, g, P = _loglik_grad(theta, Xt, Y, w, K, ref)
    gnorm = float(np.linalg.norm(g))
    if np.max(np.abs(theta)) > separation_bound:
        raise RegressionError(
            f"coefficient magnitude {np.max(np.abs(theta)):.1f} exceeds {separation_bound:g}; "
            "quasi-complete separation is likely"
        )
    if gnorm >= gtol:
        raise RegressionError(f"MNL did not converge (gradient norm {gnorm:.2e})")
    H = _hessian(P, Xt, w, others)
    S = _scores(theta, Xt, Y, w, K, ref)
    Hinv = np.linalg.inv(H)
    cov = Hinv @ (S.T @ S) @ Hinv
    cov = 0.5 * (cov + cov.T)
    share = counts / counts.sum()
    null_ll = float(np.sum(counts[counts > 0] * np.log(share[counts > 0])))
    B = theta.reshape(K - 1, p)
    return MnlModel(ref, K, design.columns, B[:, 0].copy(), B[:, 1:].copy(), cov, ll, null_ll,
                    design.n, gnorm, tuple(others))


def mcfadden_r2(model: MnlModel) -> float:
    if model.null_loglik == 0:
        raise RegressionError("null log-likelihood is zero")
    return 1.0 - model.loglik / model.null_loglik


@dataclass(frozen=True)
class OrRow:
    class_index: int
    column: str
    beta: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    p: float

    @property
    def stars(self) -> str:
        return "***" if self.p < 0.001 else "**" if self.p < 0.01 else "*" if self.p < 0.05 else ""


@dataclass(frozen=True)
class OrTable:
    rows: tuple
    reference_class: int
    level: float

    def get(self, class_index: int, column: str) -> OrRow:
        for r in self.rows:
            if r.class_index == class_index and r.column == column:
                return r
        raise KeyError((class_index, column))


def odds_ratios(model: MnlModel, level: float = 0.95) -> OrTable:
    z = float(stats.norm.ppf(0.5 + level / 2))
    se = model.se
    rows = []
    for a, k in enumerate(model.classes):
        for c, name in enumerate(model.columns):
            b, s = float(model.beta[a, c]), float(se[a, c + 1])
            p = float(2 * stats.norm.sf(abs(b / s))) if s > 0 else (1.0 if b == 0 else 0.0)
            rows.append(OrRow(k, name, b, s, math.exp(b), math.exp(b - z * s), math.exp(b + z * s), p))
    return OrTable(tuple(rows), model.reference_class, level)


@dataclass(frozen=True)
class IiaResult:
    omitted_class: int
    statistic: float
    df: int
    p: float
    raw_statistic: float
    positive_definite: bool
    note: str = ""


def hausman_mcfadden_iia(model: MnlModel, design: DesignMatrix, classes, weights=None,
                         on_failure: str = "raise") -> list:
    """Hausman-McFadden test dropping each non-reference class in turn.

    Compares the slope coefficients shared by the full and the restricted
    fit. When V_r - V_f is not positive definite the statistic is set to 0
    and p to 1; the quadratic form with a pseudo-inverse is kept as
    ``raw_statistic``. With ``on_failure="skip"`` a restricted fit that
    fails yields a row with NaN statistics and the reason in ``note``.
    """
    if on_failure not in ("raise", "skip"):
        raise ValueError("on_failure must be 'raise' or 'skip'")
    if model.K < 3:
        raise RegressionError("the IIA test needs at least three classes")
    y = np.asarray(classes, dtype=int)
    if y.size != design.n:
        y = y[design.rows]
    w = design.weights if weights is None else np.asarray(weights, dtype=float)
    if w.size != design.n:
        w = w[design.rows]
    p1 = design.p + 1
    out = []
    for m in model.classes:
        keep = y != m
        remaining = [k for k in range(model.K) if k != m]
        remap = {k: a for a, k in enumerate(remaining)}
        sub = DesignMatrix(design.X[keep], design.columns, design.rows[keep], w[keep],
                           design.reference_levels, design.specs, design.levels, design.n_dropped,
                           design.ordinal_means)
        y_sub = np.array([remap[k] for k in y[keep]])
        try:
            r = fit_mnl(sub, y_sub, reference_class=remap[model.reference_class], K=model.K - 1)
        except RegressionError as exc:
            if on_failure == "skip":
                out.append(IiaResult(m, math.nan, 0, math.nan, math.nan, False, f"restricted fit failed: {exc}"))
                continue
            raise RegressionError(f"restricted fit without class {m + 1} failed: {exc}") from exc
        shared = [k for k in model.classes if k != m]
        idx_f, idx_r = [], []
        for k in shared:
            a_f = model.classes.index(k)
            a_r = r.classes.index(remap[k])
            idx_f += [a_f * p1 + c for c in range(1, p1)]
            idx_r += [a_r * p1 + c for c in range(1, p1)]
        d = r.theta[idx_r] - model.theta[idx_f]
        V = r.cov[np.ix_(idx_r, idx_r)] - model.cov[np.ix_(idx_f, idx_f)]
        V = 0.5 * (V + V.T)
        eig = np.linalg.eigvalsh(V)
        pd = bool(eig.min() > 1e-12 * max(1.0, abs(eig).max()))
        raw = float(d @ np.linalg.pinv(V, hermitian=True) @ d)
        df = len(d)
        if pd:
            q = max(float(d @ np.linalg.solve(V, d)), 0.0)
            pval = float(stats.chi2.sf(q, df))
        else:
            q, pval = 0.0, 1.0
        out.append(IiaResult(m, q, df, pval, raw, pd))
    return out


def vif(design: DesignMatrix, weights=None) -> dict:
    """Weighted variance inflation factor per design column; inf under perfect collinearity."""
    X = design.X
    if X.shape[1] < 2:
        raise RegressionError("VIF needs at least two columns")
    w = design.weights if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    out = {}
    for j, name in enumerate(design.columns):
        y = X[:, j]
        Z = _with_intercept(np.delete(X, j, axis=1))
        coef, *_ = np.linalg.lstsq(Z * sw[:, None], y * sw, rcond=None)
        resid = y - Z @ coef
        ybar = np.sum(w * y) / np.sum(w)
        sst = float(np.sum(w * (y - ybar) ** 2))
        ssr = float(np.sum(w * resid ** 2))
        tol = ssr / sst
        out[name] = math.inf if tol < 1e-10 else 1.0 / tol
    return out


def profile_vector(design: DesignMatrix, settings: Mapping) -> np.ndarray:
    """Design row for a covariate profile.

    Categorical covariates that are not mentioned take their reference
    level; ordinal ones take their weighted analytic-sample mean.
    """
    known = {s.item_id: s for s in design.specs}
    for k in settings:
        if k not in known:
            raise RegressionError(f"unknown covariate {k!r} in profile")
    x = []
    for s in design.specs:
        if s.kind == "ordinal":
            x.append(float(settings.get(s.item_id, design.ordinal_means[s.item_id])))
            continue
        code = settings.get(s.item_id, design.reference_levels[s.item_id])
        code = _resolve_level(s, code)
        if code != design.reference_levels[s.item_id] and code not in design.levels[s.item_id]:
            raise RegressionError(f"unknown level {code!r} for covariate {s.item_id!r}")
        x.extend(1.0 if code == c else 0.0 for c in design.levels[s.item_id])
    return np.array(x)


def _resolve_level(spec: CovariateSpec, code):
    if isinstance(code, str):
        for c, lab in spec.labels.items():
            if lab == code:
                return int(c)
        try:
            return int(code)
        except ValueError:
            raise RegressionError(f"unknown level {code!r} for covariate {spec.item_id!r}") from None
    return int(code)


def predicted_profiles(model: MnlModel, design: DesignMatrix, profiles: Mapping) -> dict:
    """Class membership probabilities (all K classes) for named covariate profiles."""
    return {name: model.predict_proba(profile_vector(design, settings))[0]
            for name, settings in profiles.items()}
