"""Survey-weighted latent class analysis of polytomous items.

Estimation is EM on the weighted log-likelihood

    l(theta) = sum_i w_i log sum_k pi_k prod_j rho[j][y_ij, k]

with a multi-start protocol: many random initializations get a short
burn-in, the best of those are iterated to convergence. All starts of one
phase run as a single vectorized batch, so results do not depend on how
work is scheduled.

Random numbers come from numpy's PCG64 bit generator. Start ``s`` of a
``K``-class fit with master seed ``seed`` draws from
``SeedSequence(seed, spawn_key=(K, s))``, which makes the start sets for
different start counts nested.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ._align import optimal_matching, phi_matrix
from .dataset import DataError, SurveyDataset

MODEL_FORMAT = "wlca-model"
MODEL_VERSION = 1


class EstimationError(RuntimeError):
    """Raised when a fit cannot produce a usable solution."""


@dataclass(frozen=True)
class EmConfig:
    n_starts: int = 500
    n_best: int = 50
    burn_in: int = 20
    tol: float = 1e-8
    max_iter: int = 5000
    rho_floor: float = 1e-6
    prevalence_floor: float = 1e-10
    max_classes: int = 12
    degenerate_share: float = 1e-3
    dirichlet_prevalence: float = 5.0
    dirichlet_item: float = 1.0
    batch_size: int = 100
    accelerate: bool = True

    def __post_init__(self):
        for name in ("n_starts", "n_best", "max_iter", "max_classes", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"EmConfig.{name} must be positive")
        if self.burn_in < 0 or self.tol <= 0:
            raise ValueError("EmConfig.burn_in must be >= 0 and tol > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class LcaModel:
    """A fitted K-class model.

    ``item_probs[j]`` has shape ``(R_j, K)``: column k is the response
    distribution of item j in class k.
    """

    K: int
    prevalences: np.ndarray
    item_probs: list
    item_ids: tuple
    loglik: float
    n_params: int
    converged: bool = True
    n_starts_used: int = 1
    seed: int = 0
    n_iter: int = 0
    config_hash: str = ""
    degenerate: bool = False
    trace: np.ndarray | None = field(default=None, repr=False)
    candidate_loglik: np.ndarray | None = field(default=None, repr=False)

    @property
    def cardinalities(self) -> list[int]:
        return [p.shape[0] for p in self.item_probs]

    def profiles(self) -> np.ndarray:
        """K x sum(R_j) matrix of concatenated response probabilities."""
        return np.vstack(self.item_probs).T

    def expected_scores(self) -> np.ndarray:
        """Model-implied mean sum of item codes per class."""
        out = np.zeros(self.K)
        for probs in self.item_probs:
            out += np.arange(1, probs.shape[0] + 1) @ probs
        return out

    def permuted(self, perm) -> "LcaModel":
        """Model whose class k is this model's class ``perm[k]``."""
        perm = np.asarray(perm, dtype=int)
        return LcaModel(
            K=self.K,
            prevalences=self.prevalences[perm].copy(),
            item_probs=[p[:, perm].copy() for p in self.item_probs],
            item_ids=self.item_ids,
            loglik=self.loglik,
            n_params=self.n_params,
            converged=self.converged,
            n_starts_used=self.n_starts_used,
            seed=self.seed,
            n_iter=self.n_iter,
            config_hash=self.config_hash,
            degenerate=self.degenerate,
            trace=self.trace,
            candidate_loglik=self.candidate_loglik,
        )

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "K": self.K,
            "item_ids": list(self.item_ids),
            "cardinalities": self.cardinalities,
            "prevalences": [float(x) for x in self.prevalences],
            "item_probs": {
                item: [[float(x) for x in row] for row in probs]
                for item, probs in zip(self.item_ids, self.item_probs)
            },
            "loglik": float(self.loglik),
            "n_params": int(self.n_params),
            "converged": bool(self.converged),
            "degenerate": bool(self.degenerate),
            "n_starts_used": int(self.n_starts_used),
            "n_iter": int(self.n_iter),
            "seed": int(self.seed),
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LcaModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError("not a wlca model artifact")
        if int(d.get("version", 0)) > MODEL_VERSION:
            raise ValueError(f"model artifact version {d['version']} is newer than supported")
        items = tuple(d["item_ids"])
        probs = [np.array(d["item_probs"][i], dtype=float) for i in items]
        return cls(
            K=int(d["K"]),
            prevalences=np.array(d["prevalences"], dtype=float),
            item_probs=probs,
            item_ids=items,
            loglik=float(d["loglik"]),
            n_params=int(d["n_params"]),
            converged=bool(d["converged"]),
            n_starts_used=int(d["n_starts_used"]),
            seed=int(d["seed"]),
            n_iter=int(d.get("n_iter", 0)),
            config_hash=d.get("config_hash", ""),
            degenerate=bool(d.get("degenerate", False)),
        )


@dataclass(frozen=True)
class PosteriorMatrix:
    probs: np.ndarray
    modal: np.ndarray
    max_prob: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PosteriorMatrix":
        probs = np.asarray(probs, dtype=float)
        # argmax returns the first maximum, i.e. the lowest class index on ties
        modal = np.argmax(probs, axis=1)
        return cls(probs, modal, probs[np.arange(probs.shape[0]), modal])

    @property
    def K(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class BvrRow:
    item_a: str
    item_b: str
    bvr: float
    flagged: bool
    min_expected: float
    valid: bool = True


@dataclass(frozen=True)
class BvrTable:
    rows: tuple
    threshold: float

    @property
    def n_flagged(self) -> int:
        return sum(r.flagged for r in self.rows)


def count_parameters(K: int, cardinalities: Sequence[int]) -> int:
    """Free parameters of a K-class model: (K - 1) + K * sum_j (R_j - 1)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if any(r < 2 for r in cardinalities):
        raise ValueError("every cardinality must be >= 2")
    return (K - 1) + K * sum(r - 1 for r in cardinalities)


# --------------------------------------------------------------------------
# encoding and EM kernels


@dataclass(frozen=True)
class _Encoded:
    X: np.ndarray  # patterns x D one-hot
    weights: np.ndarray  # summed weight per pattern
    inverse: np.ndarray  # respondent -> pattern
    blocks: tuple  # slice per item into D
    cardinalities: tuple

    @property
    def XT(self) -> np.ndarray:
        return self._XT

    @property
    def starts(self) -> np.ndarray:
        return np.array([b.start for b in self.blocks])

    def __post_init__(self):
        object.__setattr__(self, "_XT", np.ascontiguousarray(self.X.T))


def _blocks(cards: Sequence[int]) -> tuple:
    out, start = [], 0
    for r in cards:
        out.append(slice(start, start + r))
        start += r
    return tuple(out)


def _one_hot(codes: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    n = codes.shape[0]
    X = np.zeros((n, sum(cards)))
    offset = 0
    for j, r in enumerate(cards):
        X[np.arange(n), offset + codes[:, j] - 1] = 1.0
        offset += r
    return X


def _encode(dataset: SurveyDataset, items: Sequence[str], weights=None) -> _Encoded:
    codes = dataset.codes(items)
    cards = tuple(dataset.cardinalities(items))
    w = dataset.weights if weights is None else np.asarray(weights, dtype=float)
    patterns, inverse = np.unique(codes, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    pw = np.bincount(inverse, weights=w, minlength=patterns.shape[0])
    return _Encoded(_one_hot(patterns, cards), pw, inverse, _blocks(cards), cards)


def floor_simplex(counts: np.ndarray, eps: float, axis: int = -1) -> np.ndarray:
    """Maximize sum_r c_r log p_r over the simplex with p_r >= eps.

    The solution is ``p_r = max(eps, c_r / lam)`` with ``lam`` set so the
    entries sum to one; floored entries are found by fixed-point iteration.
    All-zero count vectors map to the uniform distribution.
    """
    c = np.moveaxis(np.asarray(counts, dtype=float), axis, -1)
    R = c.shape[-1]
    if eps * R >= 1:
        raise ValueError("floor too large for the number of categories")
    total = c.sum(axis=-1, keepdims=True)
    fixed = np.zeros(c.shape, dtype=bool)
    lam = total
    for _ in range(R):
        free = np.where(fixed, 0.0, c).sum(axis=-1, keepdims=True)
        lam = free / (1.0 - eps * fixed.sum(axis=-1, keepdims=True))
        new = fixed | (c < eps * lam)
        if np.array_equal(new, fixed):
            break
        fixed = new
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(fixed, eps, c / lam)
    p = np.where(total > 0, p, 1.0 / R)
    return np.moveaxis(p, -1, axis)


def _log_joint(XT, log_pi, log_rho):
    # (S, K, n) log pi_k + sum_j log rho_j,y,k
    return np.matmul(np.swapaxes(log_rho, 1, 2), XT) + log_pi[:, :, None]


def _normalize_blocks(counts: np.ndarray, enc: _Encoded, eps: float) -> np.ndarray:
    """Per-item floored normalization of (S, D, K) category counts.

    Plain division is exact whenever no entry falls under the floor; only
    items where it does go through :func:`floor_simplex`.
    """
    sums = np.add.reduceat(counts, enc.starts, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = counts / np.repeat(sums, enc.cardinalities, axis=1)
    low = ~(p >= eps)
    if low.any():
        hit = np.add.reduceat(low.astype(np.int8), enc.starts, axis=1).any(axis=(0, 2))
        for j in np.flatnonzero(hit):
            sl = enc.blocks[j]
            p[:, sl, :] = floor_simplex(counts[:, sl, :], eps, axis=1)
    return p


def _em(enc: _Encoded, pi, rho, max_iter, tol, cfg: EmConfig, weights=None, trace=True):
    """Run batched EM from S starting points.

    ``pi`` is (S, K), ``rho`` is (S, D, K), ``weights`` is (n_patterns,) or
    (S, n_patterns). Returns final parameters, the log-likelihood at those
    parameters, iteration counts, convergence flags and per-start traces.
    """
    W = enc.weights if weights is None else weights
    pi = pi.copy()
    rho = rho.copy()
    S = pi.shape[0]
    ll = np.full(S, -np.inf)
    prev = np.full(S, -np.inf)
    n_iter = np.zeros(S, dtype=int)
    converged = np.zeros(S, dtype=bool)
    traces = [[] for _ in range(S)] if trace else None
    active = np.arange(S)
    for it in range(max_iter + 1):
        w_act = W if W.ndim == 1 else W[active]
        post, cur = _estep(enc.XT, w_act, np.log(pi[active]), np.log(rho[active]))
        ll[active] = cur
        if trace:
            for s, v in zip(active.tolist(), cur.tolist()):
                traces[s].append(v)
        done = np.abs(cur - prev[active]) / (np.abs(cur) + 1.0) < tol
        converged[active[done]] = True
        prev[active] = cur
        if it == max_iter:
            break
        if done.any():
            keep = ~done
            active = active[keep]
            if active.size == 0:
                break
            post = post[keep]
            if W.ndim > 1:
                w_act = w_act[keep]
        pi[active], rho[active] = _mstep(enc, post, w_act, cfg)
        n_iter[active] += 1
    return pi, rho, ll, n_iter, converged, traces


def _estep(XT, W, log_pi, log_rho):
    """Normalized posteriors (S, K, n) and log-likelihoods (S,)."""
    L = _log_joint(XT, log_pi, log_rho)
    m = L.max(axis=1)
    post = np.exp(L - m[:, None, :])
    tot = post.sum(axis=1)
    ll = np.sum(W * (m + np.log(tot)), axis=-1)
    post /= tot[:, None, :]
    return post, ll


def _mstep(enc: _Encoded, post, W, cfg: EmConfig):
    wp = post * (W[None, None, :] if W.ndim == 1 else W[:, None, :])
    nk = wp.sum(axis=2)
    pi = nk / nk.sum(axis=1, keepdims=True)
    if np.any(pi < cfg.prevalence_floor):
        pi = floor_simplex(nk, cfg.prevalence_floor, axis=-1)
    counts = np.swapaxes(np.matmul(wp, enc.X), 1, 2)
    return pi, _normalize_blocks(counts, enc, cfg.rho_floor)


def _log_normalize(theta_pi, theta_rho, enc: _Encoded):
    """Map unconstrained log-parameters back onto the simplices."""
    lp = theta_pi - theta_pi.max(axis=1, keepdims=True)
    pi = np.exp(lp)
    pi /= pi.sum(axis=1, keepdims=True)
    top = np.repeat(np.maximum.reduceat(theta_rho, enc.starts, axis=1), enc.cardinalities, axis=1)
    rho = np.exp(theta_rho - top)
    rho /= np.repeat(np.add.reduceat(rho, enc.starts, axis=1), enc.cardinalities, axis=1)
    return np.log(np.maximum(pi, 1e-300)), np.log(np.maximum(rho, 1e-300))


def _em_accelerated(enc: _Encoded, pi, rho, max_iter, tol, cfg: EmConfig, weights=None, trace=True):
    """Batched EM with squared extrapolation (SQUAREM, scheme S3).

    Every third M-step starts from a point extrapolated in log-parameter
    space from the last two EM steps. The extrapolated E-step is used only
    when its log-likelihood is at least that of the plain iterate, so the
    recorded trace stays monotone. Same interface as :func:`_em`.
    """
    X = enc.XT
    Wfull = enc.weights if weights is None else weights
    S = pi.shape[0]
    pi_out, rho_out = pi.copy(), rho.copy()
    ll_out = np.full(S, -np.inf)
    n_iter = np.zeros(S, dtype=int)
    converged = np.zeros(S, dtype=bool)
    traces = [[] for _ in range(S)] if trace else None

    idx = np.arange(S)
    W = Wfull if Wfull.ndim == 1 else Wfull
    cur_pi, cur_rho = pi.copy(), rho.copy()
    lpi, lrho = np.log(cur_pi), np.log(cur_rho)
    post, ll = _estep(X, W, lpi, lrho)
    prev = np.full(S, -np.inf)
    hist = [None, None]
    phase = 0

    def record(values):
        if trace:
            for s, v in zip(idx.tolist(), values.tolist()):
                traces[s].append(v)

    record(ll)
    for it in range(max_iter):
        prev = ll
        if phase == 2:
            l0p, l0r = hist[0]
            l1p, l1r = hist[1]
            rp, rr = l1p - l0p, l1r - l0r
            vp, vr = lpi - 2 * l1p + l0p, lrho - 2 * l1r + l0r
            nr = np.sqrt(np.sum(rp ** 2, axis=1) + np.sum(rr ** 2, axis=(1, 2)))
            nv = np.sqrt(np.sum(vp ** 2, axis=1) + np.sum(vr ** 2, axis=(1, 2)))
            with np.errstate(divide="ignore", invalid="ignore"):
                alpha = np.where(nv > 0, -nr / nv, -1.0)
            alpha = np.clip(np.nan_to_num(alpha, nan=-1.0), -100.0, -1.0)
            a1, a2 = (-2 * alpha)[:, None], (alpha ** 2)[:, None]
            xp, xr = _log_normalize(l0p + a1 * rp + a2 * vp, l0r + a1[..., None] * rr + a2[..., None] * vr, enc)
            post_x, ll_x = _estep(X, W, xp, xr)
            take = np.isfinite(ll_x) & (ll_x >= ll)
            post = np.where(take[:, None, None], post_x, post)
        else:
            hist[phase] = (lpi, lrho)
        cur_pi, cur_rho = _mstep(enc, post, W, cfg)
        lpi, lrho = np.log(cur_pi), np.log(cur_rho)
        n_iter[idx] += 1
        post, ll = _estep(X, W, lpi, lrho)
        record(ll)
        phase = (phase + 1) % 3
        done = np.abs(ll - prev) / (np.abs(ll) + 1.0) < tol
        if done.any():
            fin = idx[done]
            pi_out[fin], rho_out[fin], ll_out[fin] = cur_pi[done], cur_rho[done], ll[done]
            converged[fin] = True
            keep = ~done
            idx = idx[keep]
            if idx.size == 0:
                break
            cur_pi, cur_rho, lpi, lrho = cur_pi[keep], cur_rho[keep], lpi[keep], lrho[keep]
            post, ll = post[keep], ll[keep]
            hist = [None if h is None else (h[0][keep], h[1][keep]) for h in hist]
            if W.ndim > 1:
                W = W[keep]
    if idx.size:
        pi_out[idx], rho_out[idx], ll_out[idx] = cur_pi, cur_rho, ll
    return pi_out, rho_out, ll_out, n_iter, converged, traces


def _full_em(cfg: EmConfig):
    return _em_accelerated if cfg.accelerate else _em


def _random_starts(K: int, cards, seed: int, start_ids, cfg: EmConfig):
    D = sum(cards)
    S = len(start_ids)
    pi = np.empty((S, K))
    rho = np.empty((S, D, K))
    blocks = _blocks(cards)
    for a, s in enumerate(start_ids):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(K, int(s))))
        pi[a] = rng.dirichlet(np.full(K, cfg.dirichlet_prevalence))
        for sl, r in zip(blocks, cards):
            rho[a, sl, :] = rng.dirichlet(np.full(r, cfg.dirichlet_item), size=K).T
    pi = floor_simplex(pi, cfg.prevalence_floor, axis=-1)
    for sl in blocks:
        rho[:, sl, :] = floor_simplex(rho[:, sl, :], cfg.rho_floor, axis=1)
    return pi, rho


def _stack_params(model: LcaModel, cfg: EmConfig):
    pi = floor_simplex(model.prevalences[None, :], cfg.prevalence_floor)
    rho = np.vstack(model.item_probs)[None, :, :]
    blocks = _blocks(model.cardinalities)
    for sl in blocks:
        rho[:, sl, :] = floor_simplex(rho[:, sl, :], cfg.rho_floor, axis=1)
    return pi, rho


def _unstack(rho_flat, cards):
    return [rho_flat[sl, :].copy() for sl in _blocks(cards)]


def canonical_order(model: LcaModel) -> np.ndarray:
    """Class order by ascending expected concern score (ties: larger class first)."""
    scores = np.round(model.expected_scores(), 10)
    return np.lexsort((-model.prevalences, scores))


def _batched(ids, size):
    for a in range(0, len(ids), size):
        yield ids[a:a + size]


def fit_lca(
    dataset: SurveyDataset,
    K: int,
    config: EmConfig | None = None,
    seed: int = 0,
    items: Sequence[str] | None = None,
    init: Sequence[LcaModel] = (),
    n_starts: int | None = None,
    canonical: bool = True,
) -> LcaModel:
    """Fit a K-class model by multi-start EM.

    ``init`` supplies extra starting solutions that enter the burn-in
    ranking alongside the random starts. With ``n_starts=0`` only those are
    used. The returned classes are in canonical order unless
    ``canonical=False``.
    """
    cfg = config or EmConfig()
    items = list(items) if items is not None else dataset.indicators
    if not items:
        raise DataError("no indicator items to fit")
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > cfg.max_classes:
        raise EstimationError(f"K={K} exceeds the configured maximum of {cfg.max_classes} classes")
    enc = _encode(dataset, items)
    cards = enc.cardinalities
    n_params = count_parameters(K, cards)

    if K == 1:
        counts = enc.X.T @ enc.weights
        probs = [floor_simplex(counts[sl][:, None], cfg.rho_floor, axis=0) for sl in enc.blocks]
        rho = np.vstack(probs)[None]
        pi = np.ones((1, 1))
        _, _, ll, _, _, tr = _em(enc, pi, rho, 0, cfg.tol, cfg)
        return LcaModel(1, np.ones(1), probs, tuple(items), float(ll[0]), n_params,
                        True, 0, seed, 0, cfg.digest(), False, np.array(tr[0]))

    S = cfg.n_starts if n_starts is None else n_starts
    start_ids = np.arange(S)
    burn = []  # (ll, order key, pi, rho, trace, converged)
    for chunk in _batched(start_ids, cfg.batch_size):
        pi0, rho0 = _random_starts(K, cards, seed, chunk, cfg)
        pi1, rho1, ll1, _, conv1, tr1 = _em(enc, pi0, rho0, cfg.burn_in, cfg.tol, cfg)
        for a in range(len(chunk)):
            burn.append((ll1[a], int(chunk[a]), pi1[a], rho1[a], tr1[a]))
    for extra, model in enumerate(init):
        if model.K != K:
            raise ValueError("initial solution has the wrong number of classes")
        pi0, rho0 = _stack_params(model, cfg)
        pi1, rho1, ll1, _, _, tr1 = _em(enc, pi0, rho0, cfg.burn_in, cfg.tol, cfg)
        burn.append((ll1[0], S + extra, pi1[0], rho1[0], tr1[0]))
    if not burn:
        raise EstimationError("no starting solutions")
    burn.sort(key=lambda t: (-t[0], t[1]))
    best = burn[: min(cfg.n_best, len(burn))]

    pi_b = np.stack([b[2] for b in best])
    rho_b = np.stack([b[3] for b in best])
    pi2, rho2, ll2, it2, conv2, tr2 = _full_em(cfg)(enc, pi_b, rho_b, cfg.max_iter, cfg.tol, cfg)
    order = sorted(range(len(best)), key=lambda a: (not conv2[a], -ll2[a], best[a][1]))
    win = order[0]
    trace = np.array(best[win][4] + tr2[win][1:])
    pi_w = pi2[win]
    model = LcaModel(
        K=K,
        prevalences=pi_w.copy(),
        item_probs=_unstack(rho2[win], cards),
        item_ids=tuple(items),
        loglik=float(ll2[win]),
        n_params=n_params,
        converged=bool(conv2[win]),
        n_starts_used=len(burn),
        seed=seed,
        n_iter=int(it2[win]) + cfg.burn_in,
        config_hash=cfg.digest(),
        degenerate=bool(np.any(pi_w < cfg.degenerate_share)),
        trace=trace,
        candidate_loglik=ll2[conv2].copy(),
    )
    return model.permuted(canonical_order(model)) if canonical else model


def refit_from(model: LcaModel, dataset: SurveyDataset, config: EmConfig | None = None, weights=None) -> LcaModel:
    """Single-start EM from an existing solution, keeping its class labels."""
    cfg = config or EmConfig()
    enc = _encode(dataset, model.item_ids, weights)
    pi0, rho0 = _stack_params(model, cfg)
    pi, rho, ll, it, conv, _ = _full_em(cfg)(enc, pi0, rho0, cfg.max_iter, cfg.tol, cfg, trace=False)
    return LcaModel(model.K, pi[0], _unstack(rho[0], enc.cardinalities), model.item_ids, float(ll[0]),
                    model.n_params, bool(conv[0]), 1, model.seed, int(it[0]), cfg.digest(),
                    bool(np.any(pi[0] < cfg.degenerate_share)))


# --------------------------------------------------------------------------
# derived quantities


def _log_joint_single(model: LcaModel, dataset: SurveyDataset):
    items = list(model.item_ids)
    block = dataset.values[:, [dataset.index(i) for i in items]]
    if np.isnan(block).any():
        bad = int(np.flatnonzero(np.isnan(block).any(axis=1))[0])
        raise DataError(f"respondent {bad} has a missing indicator value")
    codes = block.astype(int)
    cards = dataset.cardinalities(items)
    if cards != model.cardinalities:
        raise DataError("model and dataset item cardinalities differ")
    with np.errstate(divide="ignore"):
        L = np.tile(np.log(model.prevalences), (codes.shape[0], 1))
        for j, probs in enumerate(model.item_probs):
            L += np.log(probs[codes[:, j] - 1, :])
    return L


def loglik(model: LcaModel, dataset: SurveyDataset, weights=None) -> float:
    """Weighted log-likelihood of ``dataset`` under ``model`` (log space)."""
    L = _log_joint_single(model, dataset)
    w = dataset.weights if weights is None else np.asarray(weights)
    return float(np.sum(w * logsumexp(L, axis=1)))


def posteriors(model: LcaModel, dataset: SurveyDataset) -> PosteriorMatrix:
    """Posterior class probabilities, computed in log space."""
    L = _log_joint_single(model, dataset)
    probs = np.exp(L - logsumexp(L, axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    return PosteriorMatrix.from_probs(probs)


def entropy(post: PosteriorMatrix, K: int | None = None) -> float:
    """Relative entropy E_K = 1 - sum(-p ln p) / (n ln K), with 0 ln 0 = 0."""
    K = post.K if K is None else K
    if K < 2:
        raise ValueError("entropy is undefined for K = 1")
    p = post.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(1.0 - (-terms.sum()) / (p.shape[0] * math.log(K)))


def reported_entropy(post: PosteriorMatrix) -> float:
    """Entropy for enumeration tables, with the K = 1 convention of 1.0."""
    return 1.0 if post.K == 1 else entropy(post)


def bivariate_residuals(model: LcaModel, dataset: SurveyDataset, threshold: float = 3.84) -> BvrTable:
    """Pearson X^2 / df of observed vs model-implied two-way tables.

    Weights are rescaled to sum to n before tabulating.
    """
    items = list(model.item_ids)
    codes = dataset.codes(items)
    w = dataset.weights * (dataset.n / dataset.weights.sum())
    total = w.sum()
    rows = []
    J = len(items)
    for a in range(J):
        for b in range(a + 1, J):
            ra, rb = model.cardinalities[a], model.cardinalities[b]
            obs = np.zeros((ra, rb))
            np.add.at(obs, (codes[:, a] - 1, codes[:, b] - 1), w)
            pa, pb = model.item_probs[a], model.item_probs[b]
            exp = total * (pa * model.prevalences) @ pb.T
            min_e = float(exp.min())
            df = (ra - 1) * (rb - 1)
            if min_e < 1e-12:
                rows.append(BvrRow(items[a], items[b], math.nan, False, min_e, False))
                continue
            x2 = float(np.sum((obs - exp) ** 2 / exp))
            bvr = x2 / df
            rows.append(BvrRow(items[a], items[b], bvr, bvr > threshold, min_e))
    return BvrTable(tuple(rows), threshold)


def align_to(reference: LcaModel, candidate: LcaModel) -> np.ndarray:
    """Permutation of candidate classes maximizing total profile congruence."""
    if reference.K != candidate.K:
        raise ValueError("models have different numbers of classes")
    return optimal_matching(phi_matrix(reference.profiles(), candidate.profiles()))


@dataclass(frozen=True)
class PrevalenceInterval:
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    n_failed: int
    level: float


def bootstrap_prevalence_ci(
    dataset: SurveyDataset,
    K: int,
    config: EmConfig | None = None,
    reference: LcaModel | None = None,
    n_boot: int = 500,
    seed: int = 0,
    level: float = 0.95,
    max_fail_share: float = 0.10,
) -> PrevalenceInterval:
    """Percentile intervals for class prevalences by resampling respondents.

    Each replicate reweights respondents by their multinomial resampling
    counts (keeping survey weights) and restarts EM from the reference
    solution; replicate labels are aligned to the reference by profile
    congruence.
    """
    cfg = config or EmConfig()
    if reference is None:
        reference = fit_lca(dataset, K, cfg, seed=seed)
    if reference.K != K:
        raise ValueError("reference model has the wrong number of classes")
    alpha = 1.0 - level
    if K == 1:
        ones = np.ones(1)
        return PrevalenceInterval(ones, ones, ones.copy(), np.ones((n_boot, 1)), 0, level)
    if not reference.converged:
        raise EstimationError("reference model did not converge")
    enc = _encode(dataset, reference.item_ids)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7919, K)))
    n = dataset.n
    reps = np.empty((n_boot, K))
    failed = 0
    pi0, rho0 = _stack_params(reference, cfg)
    for chunk in _batched(np.arange(n_boot), max(1, cfg.batch_size // 2)):
        counts = rng.multinomial(n, np.full(n, 1.0 / n), size=len(chunk))
        W = np.stack([np.bincount(enc.inverse, weights=c * dataset.weights, minlength=enc.X.shape[0])
                      for c in counts])
        pi, rho, _, _, conv, _ = _full_em(cfg)(enc, np.repeat(pi0, len(chunk), 0), np.repeat(rho0, len(chunk), 0),
                                     cfg.max_iter, cfg.tol, cfg, weights=W, trace=False)
        for a, b in enumerate(chunk):
            if not conv[a]:
                failed += 1
                reps[b] = np.nan
                continue
            cand_profiles = rho[a].T
            perm = optimal_matching(phi_matrix(reference.profiles(), cand_profiles))
            reps[b] = pi[a][perm]
    if failed > max_fail_share * n_boot:
        raise EstimationError(f"{failed} of {n_boot} bootstrap replicates failed to converge")
    ok = reps[~np.isnan(reps).any(axis=1)]
    lower = np.quantile(ok, alpha / 2, axis=0)
    upper = np.quantile(ok, 1 - alpha / 2, axis=0)
    return PrevalenceInterval(reference.prevalences.copy(), lower, upper, reps, failed, level)


# --------------------------------------------------------------------------
# scores and Hessian in the multinomial-logit parameterization


def _logit_layout(K: int, cards: Sequence[int]):
    """Parameter index slices: prevalence logits, then (class, item) blocks."""
    idx = K - 1
    blocks = {}
    for k in range(K):
        for j, r in enumerate(cards):
            blocks[(k, j)] = slice(idx, idx + r - 1)
            idx += r - 1
    return blocks, idx


def score_and_hessian(model: LcaModel, dataset: SurveyDataset, weights=None):
    """Per-respondent scores (n x p) and the weighted observed Hessian (p x p).

    Parameters are baseline-category logits (last class and last category
    are references), matching :func:`count_parameters`. The Hessian uses
    the mixture identity sum_k p_ik (H_k + g_k g_k') - s_i s_i'.
    """
    K = model.K
    cards = model.cardinalities
    codes = dataset.codes(list(model.item_ids))
    w = dataset.weights if weights is None else np.asarray(weights, dtype=float)
    n = codes.shape[0]
    post = posteriors(model, dataset).probs
    blocks, P = _logit_layout(K, cards)
    pi = model.prevalences

    G = np.zeros((K, n, P))  # complete-data score g_ik
    for k in range(K):
        e = np.zeros(K - 1)
        if k < K - 1:
            e[k] = 1.0
        G[k, :, : K - 1] = e - pi[: K - 1]
        for j, r in enumerate(cards):
            onehot = np.zeros((n, r - 1))
            hit = codes[:, j] < r
            onehot[np.flatnonzero(hit), codes[hit, j] - 1] = 1.0
            G[k, :, blocks[(k, j)]] = onehot - model.item_probs[j][: r - 1, k]
    scores = np.einsum("nk,knp->np", post, G)

    H = np.zeros((P, P))
    wsum = w.sum()
    pp = pi[: K - 1]
    H[: K - 1, : K - 1] -= wsum * (np.diag(pp) - np.outer(pp, pp))
    Nk = (w[:, None] * post).sum(axis=0)
    for k in range(K):
        for j, r in enumerate(cards):
            q = model.item_probs[j][: r - 1, k]
            sl = blocks[(k, j)]
            H[sl, sl] -= Nk[k] * (np.diag(q) - np.outer(q, q))
        Gw = G[k] * (w * post[:, k])[:, None]
        H += Gw.T @ G[k]
    H -= (scores * w[:, None]).T @ scores
    return scores, H


def model_from_logits(template: LcaModel, theta: np.ndarray) -> LcaModel:
    """Rebuild a model from a baseline-logit parameter vector."""
    K = template.K
    cards = template.cardinalities
    blocks, P = _logit_layout(K, cards)
    if theta.shape != (P,):
        raise ValueError("parameter vector has the wrong length")
    eta = np.append(theta[: K - 1], 0.0)
    pi = np.exp(eta - logsumexp(eta))
    probs = []
    for j, r in enumerate(cards):
        m = np.zeros((r, K))
        for k in range(K):
            e = np.append(theta[blocks[(k, j)]], 0.0)
            m[:, k] = np.exp(e - logsumexp(e))
        probs.append(m)
    return LcaModel(K, pi, probs, template.item_ids, math.nan, template.n_params)


def logits_of(model: LcaModel) -> np.ndarray:
    K = model.K
    cards = model.cardinalities
    blocks, P = _logit_layout(K, cards)
    theta = np.zeros(P)
    theta[: K - 1] = np.log(model.prevalences[: K - 1]) - math.log(model.prevalences[-1])
    for j, r in enumerate(cards):
        for k in range(K):
            q = model.item_probs[j][:, k]
            theta[blocks[(k, j)]] = np.log(q[:-1]) - math.log(q[-1])
    return theta
