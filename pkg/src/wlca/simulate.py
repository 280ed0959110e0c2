"""Synthetic survey data from known latent class parameters, plus oracles.

The generators here are the verification backbone for the rest of the
package: every estimator is checked against data whose truth is known.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from ._align import optimal_matching, phi_matrix
from .dataset import ItemSchema, SurveyDataset
from .lca import LcaModel, count_parameters


@dataclass
class GeneratorSpec:
    """Generative description of a synthetic survey.

    ``weight_law`` is ``"uniform"`` or ``"lognormal"`` (with ``weight_sigma``).
    ``distal_laws`` maps an outcome id to ``{"means": [...], "sd": float}``
    (``sd`` may also be a per-class list). ``covariate_laws`` maps a
    covariate id to a K-row list of category probabilities.
    """

    K: int
    prevalences: np.ndarray
    item_probs: list
    n: int
    item_ids: tuple = ()
    weight_law: str = "uniform"
    weight_sigma: float = math.sqrt(math.log(1.35))
    distal_laws: dict = field(default_factory=dict)
    covariate_laws: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.prevalences = np.asarray(self.prevalences, dtype=float)
        self.item_probs = [np.asarray(p, dtype=float) for p in self.item_probs]
        if not self.item_ids:
            self.item_ids = tuple(f"y{j + 1}" for j in range(len(self.item_probs)))
        self.item_ids = tuple(self.item_ids)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.prevalences.shape != (self.K,) or np.any(self.prevalences < 0):
            raise ValueError("prevalences must be K non-negative values")
        if abs(self.prevalences.sum() - 1) > 1e-10:
            raise ValueError("prevalences must sum to 1")
        if len(self.item_ids) != len(self.item_probs):
            raise ValueError("one item id per item is required")
        for j, p in enumerate(self.item_probs):
            if p.ndim != 2 or p.shape[1] != self.K or p.shape[0] < 2:
                raise ValueError(f"item {j}: expected an (R_j, K) probability matrix")
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=0) - 1) > 1e-10):
                raise ValueError(f"item {j}: columns must be probability vectors")
        if self.weight_law not in ("uniform", "lognormal"):
            raise ValueError(f"unknown weight law {self.weight_law!r}")
        for name, law in self.covariate_laws.items():
            probs = np.asarray(law, dtype=float)
            if probs.shape[0] != self.K or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-10):
                raise ValueError(f"covariate {name!r}: need K rows of category probabilities")
        for name, law in self.distal_laws.items():
            if len(law["means"]) != self.K:
                raise ValueError(f"distal {name!r}: need K class means")

    def as_model(self) -> LcaModel:
        cards = [p.shape[0] for p in self.item_probs]
        return LcaModel(self.K, self.prevalences.copy(), [p.copy() for p in self.item_probs],
                        self.item_ids, math.nan, count_parameters(self.K, cards))

    def replace(self, **changes) -> "GeneratorSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return GeneratorSpec(**d)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "prevalences": self.prevalences.tolist(),
            "item_ids": list(self.item_ids),
            "item_probs": [p.tolist() for p in self.item_probs],
            "n": self.n,
            "weight_law": self.weight_law,
            "weight_sigma": self.weight_sigma,
            "distal_laws": self.distal_laws,
            "covariate_laws": {k: np.asarray(v).tolist() for k, v in self.covariate_laws.items()},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d.pop("description", None)
        d["item_ids"] = tuple(d.get("item_ids", ()))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def ai_risk_spec(n: int = 5000, seed: int = 0, **changes) -> GeneratorSpec:
    """The shipped four-class fixture with AI-risk-like profiles."""
    text = resources.files("wlca").joinpath("data/ai_risk_spec.json").read_text(encoding="utf-8")
    spec = GeneratorSpec.from_dict(json.loads(text))
    return spec.replace(n=n, seed=seed, **changes)


def _categorical(rng, probs_rows: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs_rows`` (codes start at 1)."""
    cum = np.cumsum(probs_rows, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(probs_rows.shape[0])
    return (u[:, None] > cum).sum(axis=1) + 1


def generate(spec: GeneratorSpec) -> tuple[SurveyDataset, np.ndarray]:
    """Draw a dataset and its true (0-based) class labels.

    Fully determined by ``spec.seed``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n = spec.n
    classes = rng.choice(spec.K, size=n, p=spec.prevalences)
    cols, items = [], []
    for item, probs in zip(spec.item_ids, spec.item_probs):
        cols.append(_categorical(rng, probs.T[classes]))
        items.append(ItemSchema(item, probs.shape[0], "indicator"))
    for name, law in spec.distal_laws.items():
        means = np.asarray(law["means"], dtype=float)
        sd = np.broadcast_to(np.asarray(law.get("sd", 1.0), dtype=float), (spec.K,))
        cols.append(means[classes] + sd[classes] * rng.standard_normal(n))
        items.append(ItemSchema(name, None, "distal"))
    for name, law in spec.covariate_laws.items():
        probs = np.asarray(law, dtype=float)
        cols.append(_categorical(rng, probs[classes]))
        items.append(ItemSchema(name, probs.shape[1], "covariate"))
    if spec.weight_law == "uniform":
        w = np.ones(n)
    else:
        w = rng.lognormal(0.0, spec.weight_sigma, size=n)
        w *= n / w.sum()
    values = np.column_stack(cols).astype(float)
    ids = tuple(str(i + 1) for i in range(n))
    return SurveyDataset(tuple(items), values, w, ids), classes


def brute_force_loglik(model: LcaModel, dataset: SurveyDataset, max_work: float = 1e7) -> float:
    """Literal evaluation of sum_i w_i log sum_k pi_k prod_j rho_j,y_ij,k.

    Loops over respondents, classes and items with plain Python floats;
    only for small problems.
    """
    items = list(model.item_ids)
    J = len(items)
    work = dataset.n * model.K * J
    if work > max_work:
        raise ValueError(f"problem too large for brute force ({work:.0f} > {max_work:.0f})")
    cols = [dataset.index(i) for i in items]
    pi = [float(x) for x in model.prevalences]
    rho = [p.tolist() for p in model.item_probs]
    total = 0.0
    for i in range(dataset.n):
        y = [int(dataset.values[i, c]) for c in cols]
        lik = 0.0
        for k in range(model.K):
            term = pi[k]
            for j in range(J):
                term *= rho[j][y[j] - 1][k]
            lik += term
        total += float(dataset.weights[i]) * math.log(lik)
    return total


def align_labels(reference: LcaModel, candidate: LcaModel) -> np.ndarray:
    """Permutation ``perm`` such that ``candidate.permuted(perm)`` matches ``reference``.

    Chosen by optimal assignment on Tucker's congruence of the concatenated
    response-probability profiles.
    """
    if reference.K != candidate.K:
        raise ValueError(f"K mismatch: {reference.K} vs {candidate.K}")
    if list(reference.item_ids) != list(candidate.item_ids) or reference.cardinalities != candidate.cardinalities:
        raise ValueError("models are defined on different items")
    return optimal_matching(phi_matrix(reference.profiles(), candidate.profiles()))


def recovery_error(truth: LcaModel, fitted: LcaModel) -> tuple[float, float]:
    """Max absolute prevalence and response-probability error after alignment."""
    aligned = fitted.permuted(align_labels(truth, fitted))
    d_pi = float(np.max(np.abs(aligned.prevalences - truth.prevalences)))
    d_rho = max(float(np.max(np.abs(a - b))) for a, b in zip(aligned.item_probs, truth.item_probs))
    return d_pi, d_rho


def null_spec(item_probs: Sequence, n: int, seed: int = 0) -> GeneratorSpec:
    """Single-class (independence) generator for the given marginals."""
    probs = [np.asarray(p, dtype=float).reshape(-1, 1) for p in item_probs]
    return GeneratorSpec(1, np.ones(1), probs, n, seed=seed)


def sample_from_model(model: LcaModel, n: int, rng: np.random.Generator) -> SurveyDataset:
    """Indicator data of size n drawn from a fitted model, uniform weights."""
    classes = rng.choice(model.K, size=n, p=model.prevalences / model.prevalences.sum())
    cols = [_categorical(rng, probs.T[classes]) for probs in model.item_probs]
    items = tuple(ItemSchema(i, p.shape[0], "indicator") for i, p in zip(model.item_ids, model.item_probs))
    return SurveyDataset(items, np.column_stack(cols).astype(float), np.ones(n))


def split_starts(model: LcaModel, rng: np.random.Generator, jitter: float = 0.2) -> list:
    """(K+1)-class starting solutions made by splitting each class of ``model`` in two.

    The halves get response profiles pulled in opposite directions toward a
    random Dirichlet draw, so EM can move away from the K-class optimum.
    """
    out = []
    K = model.K
    for c in range(K):
        pi = np.append(model.prevalences, model.prevalences[c] / 2)
        pi[c] /= 2
        probs = []
        for p in model.item_probs:
            r = p.shape[0]
            noise = rng.dirichlet(np.ones(r))
            a = (1 - jitter) * p[:, c] + jitter * noise
            b = np.clip(p[:, c] - jitter * (noise - p[:, c]), 1e-6, None)
            b /= b.sum()
            m = np.column_stack([p, b])
            m[:, c] = a
            probs.append(m)
        out.append(LcaModel(K + 1, pi, probs, model.item_ids, math.nan,
                            count_parameters(K + 1, model.cardinalities)))
    return out
