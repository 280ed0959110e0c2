"""Command-line pipeline: diagnose, enumerate, fit, bch, regress, robustness, report.

Every stage reads one JSON config, writes its artifacts into the output
directory and stamps each file with the config hash and seed. ``bch``,
``regress`` and ``robustness`` load the persisted ``model.json`` rather than
re-estimating, so they fail when it is missing.

Exit codes: 0 success, 2 configuration or input error, 3 estimation
failure, 4 diagnostic guard tripped. On failure ``error.json`` describes
what went wrong; artifacts of stages that completed are kept.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DataError, ItemSchema, cramers_v_matrix, kish_effective_n, listwise_delete, load_dataset,
                      sparseness_report, write_dataset)
from .distal import (ConditioningError, DistalError, analyze_outcome, bch_weights, error_matrix)
from .lca import (EmConfig, EstimationError, LcaModel, bivariate_residuals, bootstrap_prevalence_ci, fit_lca,
                  posteriors, reported_entropy)
from .regress import (CovariateSpec, RegressionError, build_design, fit_mnl, hausman_mcfadden_iia, mcfadden_r2,
                      odds_ratios, predicted_profiles, vif)
from .robustness import RobustnessConfig, run_all
from .selection import SelectionConfig, enumerate_classes
from .simulate import GeneratorSpec, generate, ai_risk_spec

log = logging.getLogger("wlca")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_GUARD = 0, 2, 3, 4
STAGES = ("diagnose", "enumerate", "fit", "bch", "regress", "robustness", "simulate", "report", "all")


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    data: str | None = None
    schema: object = None  # list of item dicts, a path, or {"items": [...], "columns": {...}}
    id_column: str | None = "respondent_id"
    missing_code: int | None = 99
    k_max: int = 7
    K: int | None = None
    em: dict = field(default_factory=dict)
    blrt: dict = field(default_factory=lambda: {"reps": 199, "starts": 20, "best": 5, "policy": "all"})
    selection: dict = field(default_factory=dict)
    bootstrap_reps: int = 500
    alpha: float = 0.05
    max_condition: float = 1e6
    distal: list | None = None
    covariates: list = field(default_factory=list)
    reference_class: int | None = None
    profiles: dict = field(default_factory=dict)
    class_labels: list | None = None
    class_order: list | None = None  # 1-based canonical class numbers, in reporting order
    robustness: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    seed: int | None = None
    out: str = "wlca_out"
    threads: int = 1
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        names = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, path.parent)

    def validate(self) -> None:
        for name in ("k_max", "bootstrap_reps", "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.K is not None and (not isinstance(self.K, int) or self.K < 1):
            raise ConfigError("K must be a positive integer")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if self.reference_class is not None and not (isinstance(self.reference_class, int)
                                                     and 1 <= self.reference_class):
            raise ConfigError("reference_class is a 1-based class number")
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.em_config()
            self.selection_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def results_dict(self) -> dict:
        """Settings that can change results (output location and threads cannot)."""
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("out", "threads", "base_dir"):
            d.pop(k)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.results_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def em_config(self) -> EmConfig:
        return EmConfig(**self.em)

    def selection_config(self) -> SelectionConfig:
        b = dict(self.blrt)
        unknown = set(b) - {"reps", "starts", "best", "policy", "early_stop"}
        if unknown:
            raise ConfigError(f"unknown blrt keys: {sorted(unknown)}")
        return SelectionConfig(
            em=self.em_config(),
            blrt_reps=int(b.get("reps", 199)),
            blrt_starts=int(b.get("starts", 20)),
            blrt_best=int(b.get("best", 5)),
            blrt_policy=b.get("policy", "all"),
            blrt_early_stop=bool(b.get("early_stop", True)),
            alpha=self.alpha,
            n_jobs=self.threads,
            **self.selection,
        )

    def robustness_config(self) -> RobustnessConfig:
        r = self.robustness
        kw = {k: r[k] for k in ("loo_threshold", "class_floor", "phi_threshold", "phi_statistic", "start_tol")
              if k in r}
        if "start_counts" in r:
            kw["start_counts"] = tuple(int(c) for c in r["start_counts"])
        return RobustnessConfig(em=self.em_config(), max_condition=self.max_condition, **kw)


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out = str(Path(args.out).resolve())
    if args.kmax is not None:
        cfg.k_max = args.kmax
    if args.blrt_reps is not None:
        cfg.blrt = {**cfg.blrt, "reps": args.blrt_reps}
    if args.starts is not None:
        em = dict(cfg.em)
        em["n_starts"] = args.starts
        em["n_best"] = min(em.get("n_best", EmConfig.n_best), args.starts)
        cfg.em = em
    cfg.validate()
    return cfg


def load_schema(spec, cfg: PipelineConfig) -> tuple[list, dict]:
    """Schema items and an optional item-id -> CSV-header map."""
    if spec is None:
        raise ConfigError("config needs a 'schema'")
    if isinstance(spec, str):
        if spec.startswith("builtin:"):
            name = spec.split(":", 1)[1]
            try:
                text = resources.files("wlca").joinpath(f"data/{name}_schema.json").read_text(encoding="utf-8")
            except FileNotFoundError:
                raise ConfigError(f"no built-in schema {name!r}") from None
            spec = json.loads(text)
        else:
            try:
                spec = json.loads(cfg.resolve(spec).read_text(encoding="utf-8"))
            except (FileNotFoundError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read schema {spec!r}: {exc}") from None
    columns = {}
    if isinstance(spec, dict):
        columns = dict(spec.get("columns") or {})
        spec = spec.get("items")
    if not isinstance(spec, list):
        raise ConfigError("schema must be a list of items")
    try:
        items = [ItemSchema.from_dict(d) for d in spec]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad schema entry: {exc}") from None
    return items, columns


# --------------------------------------------------------------------------
# artifact writing


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".10g")
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not math.isfinite(x) else x
    return x


class Artifacts:
    """Writes stamped artifacts into one output directory."""

    def __init__(self, out: Path, config_hash: str, seed: int | None):
        self.out = out
        self.hash = config_hash
        self.seed = seed
        out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> str:
        return f"wlca {__version__} | config {self.hash} | seed {self.seed}"

    def path(self, name: str) -> Path:
        return self.out / name

    def csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        buf.write(f"# {self.stamp}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        return self._write(name, buf.getvalue())

    def json(self, name: str, obj: dict) -> Path:
        doc = {"generator": f"wlca {__version__}", "config_hash": self.hash, "seed": self.seed}
        doc.update(_jsonable(obj))
        return self._write(name, json.dumps(doc, indent=2) + "\n")

    def markdown(self, name: str, text: str) -> Path:
        return self._write(name, f"<!-- {self.stamp} -->\n\n{text.rstrip()}\n")

    def _write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        log.info("wrote %s", p)
        return p

    def read_json(self, name: str, stage: str) -> dict:
        p = self.path(name)
        if not p.exists():
            raise ConfigError(f"{stage}: required artifact {p} is missing; run the producing stage first")
        return json.loads(p.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# markdown helpers


def _table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def _p(p, floor=None) -> str:
    if p is None:
        return "n/a"
    if floor is not None and p <= floor:
        return f"<={floor:.3f}"
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _num(x, nd=3) -> str:
    return "n/a" if x is None else f"{x:,.{nd}f}"


# --------------------------------------------------------------------------
# pipeline


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.art = Artifacts(cfg.resolve(cfg.out), cfg.digest(), cfg.seed)
        self._data = None
        self._models = {}

    @property
    def seed(self) -> int:
        if self.cfg.seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        return self.cfg.seed

    # data ------------------------------------------------------------------

    def dataset(self):
        """Loaded data after listwise deletion on the indicators."""
        if self._data is None:
            if not self.cfg.data:
                raise ConfigError("config needs a 'data' path")
            items, columns = load_schema(self.cfg.schema, self.cfg)
            raw = load_dataset(self.cfg.resolve(self.cfg.data), items, self.cfg.id_column,
                               self.cfg.missing_code, columns)
            if not raw.indicators:
                raise ConfigError("schema declares no indicator items")
            data, report = listwise_delete(raw, raw.indicators)
            self._data = (raw, data, report)
        return self._data

    def labels(self, K: int) -> list:
        lab = self.cfg.class_labels
        if lab and len(lab) == K:
            return [str(x) for x in lab]
        return [f"C{k + 1}" for k in range(K)]

    # stages ----------------------------------------------------------------

    def diagnose(self):
        raw, data, rep = self.dataset()
        ind = data.indicators
        n_eff, deff = kish_effective_n(data.weights)
        cv = cramers_v_matrix(data, ind)
        sp = sparseness_report(data, ind)
        a = self.art
        a.csv("deletion.csv", ["item", "missing"], sorted(rep.per_item_missing.items()))
        a.csv("cramers_v.csv", ["item"] + list(cv.items), [[i] + list(row) for i, row in zip(cv.items, cv.v)])
        a.csv("cramers_v_p.csv", ["item"] + list(cv.items), [[i] + list(row) for i, row in zip(cv.items, cv.p)])
        inv = []
        for it in raw.items:
            col = raw.column(it.item_id)
            inv.append([it.item_id, it.role, it.cardinality, it.reverse_coded, int(np.isnan(col).sum())])
        a.csv("variables.csv", ["item", "role", "categories", "reverse_coded", "missing"], inv)
        summary = {
            "n_raw": rep.n_before, "n_analytic": rep.n_after, "retention_rate": rep.retention_rate,
            "per_item_missing": rep.per_item_missing, "kish_n_eff": n_eff, "design_effect": deff,
            "theoretical_cells": sp.theoretical_cells, "observed_patterns": sp.observed_patterns,
            "sparseness_ratio": sp.sparseness_ratio, "cramers_v_items": list(cv.items),
            "cramers_v": cv.v, "cramers_v_p": cv.p, "variables": inv,
        }
        a.json("diagnostics.json", summary)
        a.markdown("diagnostics.md", render_diagnostics(summary))
        return summary

    def enumerate(self):
        _, data, _ = self.dataset()
        sel = self.cfg.selection_config()
        tab = enumerate_classes(data, self.cfg.k_max, sel, seed=self.seed, models=self._models)
        self._models.update(tab.models)
        header = ["K", "LL", "n_par", "BIC", "SABIC", "Entropy", "BLRT_p", "VLMR_p",
                  "AIC", "min_class_share", "VLMR_stat", "BLRT_reps", "BLRT_failed", "converged"]
        rows = [[r.K, r.loglik, r.n_params, r.bic, r.sabic, r.entropy, r.blrt_p, r.vlmr_p, r.aic,
                 r.min_class_share, r.vlmr_stat, r.blrt_reps_used, r.blrt_failed, r.converged] for r in tab.rows]
        self.art.csv("enumeration.csv", header, rows)
        long = []
        for r in tab.rows:
            for name in ("bic", "sabic", "aic", "entropy", "loglik", "n_params"):
                long.append([r.K, name, getattr(r, name)])
        self.art.csv("fit_indices_long.csv", ["K", "metric", "value"], long)
        summary = {
            "n": tab.n, "recommended_K": tab.recommended_K, "rationale": tab.rationale,
            "blrt_reps": sel.blrt_reps, "rows": [dict(zip(header, r)) for r in rows],
        }
        self.art.json("enumeration.json", summary)
        self.art.markdown("enumeration.md", render_enumeration(summary))
        return summary

    def _chosen_K(self) -> int:
        if self.cfg.K is not None:
            return self.cfg.K
        p = self.art.path("enumeration.json")
        if p.exists():
            K = json.loads(p.read_text(encoding="utf-8")).get("recommended_K")
            if K is None:
                raise EstimationError("enumeration recommended no K; set 'K' in the config")
            return int(K)
        raise ConfigError("set 'K' in the config or run 'enumerate' first")

    def fit(self):
        _, data, _ = self.dataset()
        K = self._chosen_K()
        em = self.cfg.em_config()
        model = self._models.get(K) or fit_lca(data, K, em, seed=self.seed)
        order = self.cfg.class_order
        if order is not None:
            if sorted(order) != list(range(1, K + 1)):
                raise ConfigError(f"class_order must be a permutation of 1..{K}")
            model = model.permuted([k - 1 for k in order])
        if self.cfg.class_labels and len(self.cfg.class_labels) != K:
            log.warning("class_labels has %d entries for K=%d; using C1..C%d", len(self.cfg.class_labels), K, K)
        labels = self.labels(K)
        a = self.art
        a.json("model.json", {"model": model.to_dict(), "class_labels": labels})
        post = posteriors(model, data)
        prof_rows, long_rows = [], []
        for item, probs in zip(model.item_ids, model.item_probs):
            for r in range(probs.shape[0]):
                prof_rows.append([item, r + 1] + list(probs[r]))
                for k in range(K):
                    long_rows.append([labels[k], item, r + 1, probs[r, k]])
        a.csv("profiles.csv", ["item", "category"] + labels, prof_rows)
        a.csv("profiles_long.csv", ["class", "item", "category", "probability"], long_rows)
        ci = bootstrap_prevalence_ci(data, K, em, model, n_boot=self.cfg.bootstrap_reps, seed=self.seed) if K > 1 else None
        w = data.weights
        modal_share = np.bincount(post.modal, weights=w, minlength=K) / w.sum()
        cls_rows = []
        cem = error_matrix(post, w) if K > 1 else None
        for k in range(K):
            cls_rows.append([labels[k], model.prevalences[k],
                             None if ci is None else ci.lower[k], None if ci is None else ci.upper[k],
                             modal_share[k], None if cem is None else cem.accuracies[k]])
        a.csv("classes.csv", ["class", "prevalence", "ci_low", "ci_high", "modal_share", "accuracy"], cls_rows)
        a.csv("assignments.csv", ["row", "modal_class", "max_posterior"],
              [[i + 1, int(post.modal[i]) + 1, post.max_prob[i]] for i in range(data.n)])
        bvr = bivariate_residuals(model, data)
        a.csv("bvr.csv", ["item_a", "item_b", "bvr", "flagged", "min_expected", "valid"],
              [[r.item_a, r.item_b, r.bvr, r.flagged, r.min_expected, r.valid] for r in bvr.rows])
        summary = {
            "K": K, "class_labels": labels, "loglik": model.loglik, "n_params": model.n_params,
            "entropy": reported_entropy(post), "prevalences": model.prevalences,
            "ci_low": None if ci is None else ci.lower, "ci_high": None if ci is None else ci.upper,
            "bootstrap_failed": None if ci is None else ci.n_failed, "modal_share": modal_share,
            "bvr_flagged": bvr.n_flagged, "bvr_pairs": len(bvr.rows), "converged": model.converged,
            "degenerate": model.degenerate, "n_starts": model.n_starts_used,
        }
        if cem is not None:
            a.csv("classification.csv", ["matrix", "class"] + labels,
                  [["assignment", labels[k]] + list(cem.assignment[k]) for k in range(K)]
                  + [["misclassification", labels[k]] + list(cem.D[k]) for k in range(K)])
            summary.update(average_diagonal=cem.average_diagonal, accuracies=cem.accuracies,
                           assignment=cem.assignment, misclassification=cem.D)
        top = {}
        for item, probs in zip(model.item_ids, model.item_probs):
            top[item] = [int(np.argmax(probs[:, k])) + 1 for k in range(K)]
        summary["top_categories"] = top
        a.json("fit.json", summary)
        a.markdown("fit.md", render_fit(summary))
        return summary

    def _model(self, stage: str) -> tuple[LcaModel, list]:
        doc = self.art.read_json("model.json", stage)
        try:
            return LcaModel.from_dict(doc["model"]), doc.get("class_labels")
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{stage}: unreadable model artifact: {exc}") from None

    def bch(self):
        model, labels = self._model("bch")
        _, data, _ = self.dataset()
        if model.K < 2:
            raise EstimationError("BCH analysis needs K >= 2")
        labels = labels or self.labels(model.K)
        outcomes = self.cfg.distal if self.cfg.distal is not None else data.items_with_role("distal")
        if not outcomes:
            raise ConfigError("no distal outcomes configured")
        post = posteriors(model, data)
        cem = error_matrix(post, data.weights)
        W = bch_weights(cem, self.cfg.max_condition)
        results = [analyze_outcome(data, z, post, W, self.cfg.alpha) for z in outcomes]
        K = model.K
        header = ["outcome"] + [f"{lab}_{s}" for lab in labels for s in ("mean", "se")] + ["chi2", "df", "p", "n_used"]
        rows = []
        for r in results:
            cells = [r.outcome_id]
            for k in range(K):
                cells += [r.class_means[k], r.se[k]]
            rows.append(cells + [r.wald_chi2, r.df, r.p, r.n_used])
        a = self.art
        a.csv("distal.csv", header, rows)
        a.csv("distal_pairwise.csv", ["outcome", "class_a", "class_b", "difference", "se", "z", "p", "p_holm", "reject"],
              [[r.outcome_id, labels[q.a], labels[q.b], q.estimate, q.se, q.z, q.p, q.p_holm, q.reject]
               for r in results for q in r.pairwise])
        a.csv("distal_long.csv", ["outcome", "class", "mean", "se", "ci_low", "ci_high"],
              [[r.outcome_id, labels[k], r.class_means[k], r.se[k], r.class_means[k] - 1.959963984540054 * r.se[k],
                r.class_means[k] + 1.959963984540054 * r.se[k]] for r in results for k in range(K)])
        a.csv("bch_weights.csv", ["matrix", "class"] + labels,
              [["D", labels[k]] + list(cem.D[k]) for k in range(K)] + [["W", labels[k]] + list(W.W[k]) for k in range(K)])
        summary = {
            "class_labels": labels, "condition_number": W.condition_number,
            "outcomes": [{"outcome": r.outcome_id, "means": r.class_means, "se": r.se, "chi2": r.wald_chi2,
                          "df": r.df, "p": r.p, "n_used": r.n_used,
                          "pairwise": [{"a": q.a, "b": q.b, "difference": q.estimate, "p": q.p,
                                        "p_holm": q.p_holm, "reject": q.reject} for q in r.pairwise]}
                         for r in results],
        }
        a.json("distal.json", summary)
        a.markdown("distal.md", render_distal(summary))
        return summary

    def regress(self):
        model, labels = self._model("regress")
        _, data, _ = self.dataset()
        labels = labels or self.labels(model.K)
        if not self.cfg.covariates:
            raise ConfigError("no covariates configured")
        try:
            specs = [CovariateSpec.from_dict(c) for c in self.cfg.covariates]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad covariate spec: {exc}") from None
        post = posteriors(model, data)
        design = build_design(data, specs)
        ref = None if self.cfg.reference_class is None else self.cfg.reference_class - 1
        mnl = fit_mnl(design, post.modal, reference_class=ref, K=model.K)
        orr = odds_ratios(mnl)
        iia = hausman_mcfadden_iia(mnl, design, post.modal, on_failure="skip") if model.K >= 3 else []
        vifs = vif(design) if design.p >= 2 else {}
        probs = predicted_profiles(mnl, design, self.cfg.profiles) if self.cfg.profiles else {}
        a = self.art
        others = list(mnl.classes)
        wide = []
        for c in design.columns:
            cells = [c]
            for k in others:
                r = orr.get(k, c)
                cells.append(f"{r.odds_ratio:.2f} [{r.ci_low:.2f}, {r.ci_high:.2f}]{r.stars}")
            wide.append(cells)
        a.csv("odds_ratios.csv", ["covariate"] + [labels[k] for k in others], wide)
        a.csv("odds_ratios_long.csv", ["class", "covariate", "beta", "se", "odds_ratio", "ci_low", "ci_high", "p", "significant"],
              [[labels[r.class_index], r.column, r.beta, r.se, r.odds_ratio, r.ci_low, r.ci_high, r.p, r.p < 0.05]
               for r in orr.rows])
        if probs:
            a.csv("predicted_profiles.csv", ["profile"] + labels, [[name] + list(p) for name, p in probs.items()])
        n = design.n
        k_par = mnl.n_params
        summary = {
            "reference_class": labels[mnl.reference_class], "n_used": n, "n_dropped": design.n_dropped,
            "loglik": mnl.loglik, "null_loglik": mnl.null_loglik, "mcfadden_r2": mcfadden_r2(mnl),
            "aic": -2 * mnl.loglik + 2 * k_par, "bic": -2 * mnl.loglik + k_par * math.log(n),
            "iia": [{"omitted": labels[r.omitted_class], "statistic": r.statistic, "df": r.df, "p": r.p,
                     "raw_statistic": r.raw_statistic, "positive_definite": r.positive_definite, "note": r.note}
                    for r in iia],
            "vif": vifs, "max_vif": max(vifs.values()) if vifs else None,
            "sparse_levels": [list(s) for s in design.sparse_levels],
            "odds_ratios": [[labels[r.class_index], r.column, r.odds_ratio, r.ci_low, r.ci_high, r.p] for r in orr.rows],
            "columns": list(design.columns), "classes": [labels[k] for k in others],
            "predicted_profiles": {k: list(v) for k, v in probs.items()}, "class_labels": labels,
        }
        a.json("regress.json", summary)
        a.markdown("regress.md", render_regress(summary))
        return summary

    def robustness(self):
        model, labels = self._model("robustness")
        _, data, _ = self.dataset()
        r = self.cfg.robustness
        rcfg = self.cfg.robustness_config()
        checks = [c for c in ("loo", "estimator", "invariance", "starts") if r.get(c, True) is not False]
        outcomes = r.get("outcomes")
        if outcomes is None:
            outcomes = self.cfg.distal if self.cfg.distal is not None else data.items_with_role("distal")
        inv = r.get("invariance") if isinstance(r.get("invariance"), dict) else {}
        split = inv.get("covariate")
        if model.K < 2:
            checks = [c for c in checks if c not in ("estimator",)]
        rep = run_all(data, model, rcfg, outcomes=outcomes, split=split, groups=inv.get("groups"),
                      seed=self.seed, checks=checks)
        rows = []
        summary = {"verdicts": rep.verdicts}
        if rep.loo is not None:
            for x in rep.loo:
                rows.append(["loo", x.omitted, "max_abs_dpi", x.max_abs_dpi])
                rows.append(["loo", x.omitted, "recovered", x.recovered])
            summary["loo"] = {"max_abs_dpi": max(x.max_abs_dpi for x in rep.loo),
                              "all_recovered": all(x.recovered for x in rep.loo),
                              "rows": [[x.omitted, x.max_abs_dpi, x.recovered] for x in rep.loo],
                              "threshold": rcfg.loo_threshold}
        if rep.estimator_check is not None:
            e = rep.estimator_check
            for x in e.rows:
                rows.append(["estimator", x.outcome, "naive_gap", x.naive_gap])
                rows.append(["estimator", x.outcome, "ml3_gap", x.ml3_gap])
                rows.append(["estimator", x.outcome, "equivalent", x.equivalent])
            summary["estimator"] = {"max_attenuation": e.max_attenuation, "max_ml3_gap": e.max_ml3_gap,
                                    "equivalent": e.passed}
        if rep.invariance is not None:
            c = rep.invariance.congruence
            for k, phi in enumerate(c.phi):
                rows.append(["invariance", f"class_{k + 1}", "phi", phi])
            rows.append(["invariance", "all", "mean_phi", c.mean_phi])
            rows.append(["invariance", "all", "min_phi", c.min_phi])
            summary["invariance"] = {"covariate": rep.invariance.covariate, "groups": list(rep.invariance.groups),
                                     "n": list(rep.invariance.n), "mean_phi": c.mean_phi, "min_phi": c.min_phi,
                                     "phi": c.phi, "threshold": rcfg.phi_threshold,
                                     "statistic": rcfg.phi_statistic}
        if rep.start_stability is not None:
            s = rep.start_stability
            for x in s.rows:
                rows.append(["starts", str(x.n_starts), "loglik", x.loglik])
                rows.append(["starts", str(x.n_starts), "best_so_far", x.best_so_far])
                rows.append(["starts", str(x.n_starts), "candidate_range", x.candidate_range])
            summary["starts"] = {"range": s.range_raw, "range_nested_best": s.range_best,
                                 "counts": [x.n_starts for x in s.rows], "loglik": [x.loglik for x in s.rows],
                                 "candidate_range": [x.candidate_range for x in s.rows]}
        self.art.csv("robustness.csv", ["check", "unit", "quantity", "value"], rows)
        self.art.json("robustness.json", summary)
        self.art.markdown("robustness.md", render_robustness(summary))
        return summary

    def simulate(self):
        s = dict(self.cfg.simulate)
        spec_ref = s.pop("spec", "ai_risk")
        n = s.pop("n", None)
        name = s.pop("output", "simulated.csv")
        if s:
            raise ConfigError(f"unknown simulate keys: {sorted(s)}")
        if spec_ref == "ai_risk":
            spec = ai_risk_spec(seed=self.seed)
        else:
            try:
                spec = GeneratorSpec.from_json(self.cfg.resolve(spec_ref)).replace(seed=self.seed)
            except (OSError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"cannot read generator spec {spec_ref!r}: {exc}") from None
        if n is not None:
            spec = spec.replace(n=int(n))
        data, classes = generate(spec)
        path = self.art.path(name)
        extra = {"true_class": [int(c) + 1 for c in classes]}
        write_dataset(data, path, extra=extra, comment=self.art.stamp)
        schema = [it.to_dict() for it in data.items] + [ItemSchema("weight", None, "weight").to_dict()]
        self.art.json("simulated_schema.json", {"items": schema})
        self.art.json("simulated_truth.json", {"spec": spec.to_dict()})
        return {"path": str(path), "n": data.n}

    def report(self):
        parts = ["# Latent class analysis report"]
        sections = [("diagnostics.json", render_diagnostics), ("enumeration.json", render_enumeration),
                    ("fit.json", render_fit), ("distal.json", render_distal), ("regress.json", render_regress),
                    ("robustness.json", render_robustness)]
        found = 0
        for name, render in sections:
            p = self.art.path(name)
            if p.exists():
                parts.append(render(json.loads(p.read_text(encoding="utf-8"))))
                found += 1
        if not found:
            raise ConfigError("nothing to report: no stage artifacts in the output directory")
        self.art.markdown("report.md", "\n\n".join(parts))
        return {"sections": found}

    def all(self):
        self.diagnose()
        enum = self.enumerate()
        if self.cfg.K is None and enum["recommended_K"] is None:
            raise EstimationError("enumeration recommended no K; set 'K' in the config")
        fit = self.fit()
        K = fit["K"]
        if K >= 2 and (self.cfg.distal is not None or self.dataset()[1].items_with_role("distal")):
            self.bch()
        if self.cfg.covariates:
            self.regress()
        if self.cfg.robustness.get("enabled", True):
            self.robustness()
        return self.report()


# --------------------------------------------------------------------------
# renderers (artifact dict -> Markdown)


def render_diagnostics(d: dict) -> str:
    out = ["## Data and indicator diagnostics", ""]
    out.append(f"Analytic sample {d['n_analytic']:,} of {d['n_raw']:,} rows "
               f"(retention {100 * d['retention_rate']:.1f}%). Kish effective n {d['kish_n_eff']:,.0f}, "
               f"design effect {d['design_effect']:.2f}.")
    out.append(f"Response patterns: {d['observed_patterns']:,} observed of {d['theoretical_cells']:,} possible "
               f"(sparseness {d['sparseness_ratio']:.3f}).")
    out.append("")
    items = d["cramers_v_items"]
    V = d["cramers_v"]
    rows = []
    for a, item in enumerate(items):
        rows.append([item] + [("" if b > a else f"{V[a][b]:.3f}") for b in range(len(items))])
    out.append("Bias-corrected weighted Cramer's V")
    out.append("")
    out.append(_table(["item"] + items, rows))
    return "\n".join(out)


def render_enumeration(d: dict) -> str:
    floor = 1.0 / (d["blrt_reps"] + 1)
    rows = []
    for r in d["rows"]:
        mark = "**" if r["K"] == d["recommended_K"] else ""
        rows.append([f"{mark}{r['K']}{mark}", _num(r["LL"], 1), r["n_par"], _num(r["BIC"], 1), _num(r["SABIC"], 1),
                     _num(r["Entropy"]), _blrt_cell(r, d["blrt_reps"], floor),
                     "---" if r["VLMR_p"] is None else _p(r["VLMR_p"]), f"{100 * r['min_class_share']:.1f}%"])
    out = ["## Class enumeration", "",
           _table(["K", "LL", "n_par", "BIC", "SABIC", "Entropy", "BLRT p", "VLMR p", "smallest class"], rows), ""]
    rec = d["recommended_K"]
    out.append(f"Recommended K: {rec if rec is not None else 'none'}. "
               f"BLRT with {d['blrt_reps']} replicates; smallest attainable p is {floor:.3f}.")
    out.append("")
    out.append("| K | entropy ok | share ok | BLRT ok | VLMR ok | BIC decrement in | out | ratio | elbow | admissible |")
    out.append("|---|---|---|---|---|---|---|---|---|---|")
    for e in d["rationale"]:
        if "entropy_ok" not in e:
            continue
        out.append("| " + " | ".join(str(x) for x in [
            e["K"], e["entropy_ok"], e["share_ok"], e["blrt_ok"], e["vlmr_ok"], _num(e["bic_decrement_in"], 1),
            _num(e["bic_decrement_out"], 1), _num(e["elbow_ratio"]), e["elbow_ok"], e["admissible"]]) + " |")
    last = d["rationale"][-1] if d["rationale"] else {}
    if "reason" in last:
        out.append("")
        out.append(f"Rule outcome: {last['reason']} (sequential-test range K <= {last.get('K_seq')}).")
    return "\n".join(out)


def _blrt_cell(r: dict, reps: int, floor: float) -> str:
    if r["BLRT_p"] is None:
        return "---"
    cell = _p(r["BLRT_p"], floor)
    used = r.get("BLRT_reps")
    # early stopping: the decision is final once p < alpha became impossible
    return cell if used is None or used >= reps else f"{cell} (stopped at {used})"


def render_fit(d: dict) -> str:
    labels = d["class_labels"]
    out = ["## Latent class solution", "",
           f"K = {d['K']}, log-likelihood {d['loglik']:,.2f}, {d['n_params']} parameters, "
           f"entropy {d['entropy']:.3f}.", ""]
    rows = []
    for k, lab in enumerate(labels):
        ci = "" if d["ci_low"] is None else f"[{100 * d['ci_low'][k]:.1f}, {100 * d['ci_high'][k]:.1f}]"
        acc = "" if "accuracies" not in d else f"{d['accuracies'][k]:.3f}"
        rows.append([lab, f"{100 * d['prevalences'][k]:.1f}%", ci, f"{100 * d['modal_share'][k]:.1f}%", acc])
    out.append(_table(["class", "prevalence", "95% CI", "modal share", "assignment accuracy"], rows))
    if "average_diagonal" in d:
        out.append("")
        out.append(f"Average assignment accuracy {d['average_diagonal']:.3f}. "
                   f"Bivariate residuals above 3.84: {d['bvr_flagged']} of {d['bvr_pairs']} pairs.")
    out.append("")
    out.append("Most likely response category per item and class")
    out.append("")
    out.append(_table(["item"] + labels, [[i] + v for i, v in d["top_categories"].items()]))
    return "\n".join(out)


def render_distal(d: dict) -> str:
    labels = d["class_labels"]
    rows = []
    for o in d["outcomes"]:
        cells = [o["outcome"]] + [f"{m:.2f} ({s:.2f})" for m, s in zip(o["means"], o["se"])]
        cells += [_num(o["chi2"], 2), _p(o["p"])]
        rows.append(cells)
    df = d["outcomes"][0]["df"] if d["outcomes"] else 0
    out = ["## Distal outcomes (BCH)", "",
           _table(["outcome"] + labels + [f"chi2({df})", "p"], rows), "",
           f"Condition number of the classification error matrix: {d['condition_number']:.2f}. "
           "Pairwise contrasts with Holm correction are in distal_pairwise.csv."]
    return "\n".join(out)


def render_regress(d: dict) -> str:
    labels = d["classes"]
    by = {(c, k): (o, lo, hi, p) for c, k, o, lo, hi, p in d["odds_ratios"]}
    rows = []
    for col in d["columns"]:
        cells = [col]
        for c in labels:
            o, lo, hi, p = by[(c, col)]
            stars = "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""
            cells.append(f"{o:.2f} [{lo:.2f}, {hi:.2f}]{stars}")
        rows.append(cells)
    out = [f"## Class membership regression (reference {d['reference_class']})", "",
           _table(["covariate"] + labels, rows), "",
           f"n = {d['n_used']:,} ({d['n_dropped']} dropped for missing covariates). "
           f"McFadden pseudo-R2 {d['mcfadden_r2']:.3f}; AIC {d['aic']:,.1f}; BIC {d['bic']:,.1f}."]
    if d["max_vif"] is not None:
        out.append(f"Largest VIF {d['max_vif']:.2f}.")
    if d["iia"]:
        out.append("Hausman-McFadden IIA: " + "; ".join(
            f"without {r['omitted']}: q = {r['statistic']:.2f}, p = {r['p']:.3f}" if r["p"] is not None
            else f"without {r['omitted']}: not computed ({r['note']})" for r in d["iia"]) + ".")
    if d["sparse_levels"]:
        out.append("Sparse covariate levels (weighted count below 30): " + ", ".join(
            f"{a}={b}" for a, b, _ in d["sparse_levels"]) + ".")
    if d["predicted_profiles"]:
        out.append("")
        out.append(_table(["profile"] + d["class_labels"],
                          [[k] + [f"{x:.3f}" for x in v] for k, v in d["predicted_profiles"].items()]))
    return "\n".join(out)


def render_robustness(d: dict) -> str:
    v = d["verdicts"]
    rows = []
    if "loo" in d:
        x = d["loo"]
        rows.append(["Indicator sensitivity", f"largest prevalence shift {x['max_abs_dpi']:.3f} (threshold {x['threshold']:.2f}); "
                     f"all classes above floor in every refit: {x['all_recovered']}", _verdict(v.get("loo"))])
    if "estimator" in d:
        x = d["estimator"]
        rows.append(["BCH vs ML three-step", f"largest ML3 vs BCH gap {x['max_ml3_gap']:.3f}; "
                     f"largest naive vs BCH gap {x['max_attenuation']:.3f}", _verdict(v.get("estimator"))])
    if "invariance" in d:
        x = d["invariance"]
        rows.append(["Configural invariance", f"{x['covariate']} {x['groups'][0]} vs {x['groups'][1]}: "
                     f"mean phi = {x['mean_phi']:.3f}, min phi = {x['min_phi']:.3f} "
                     f"(threshold {x['threshold']:.2f} on {x['statistic']})", _verdict(v.get("invariance"))])
    if "starts" in d:
        x = d["starts"]
        rows.append(["Random starts", f"log-likelihood range {x['range']:.3f} across "
                     f"{x['counts'][0]} to {x['counts'][-1]} starts", _verdict(v.get("starts"))])
    return "\n".join(["## Robustness checks", "", _table(["check", "result", "verdict"], rows)])


def _verdict(ok) -> str:
    return "n/a" if ok is None else ("Pass" if ok else "Fail")


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wlca", description="Survey-weighted latent class analysis pipeline.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, help="pipeline configuration (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory (overrides the config; relative to the working directory)")
    p.add_argument("--kmax", type=int)
    p.add_argument("--blrt-reps", type=int)
    p.add_argument("--starts", type=int, help="random starts for every LCA fit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConditioningError):
        return EXIT_GUARD
    if isinstance(exc, (ConfigError, DataError)):
        return EXIT_CONFIG
    if isinstance(exc, (EstimationError, RegressionError, DistalError)):
        return EXIT_ESTIMATION
    return EXIT_ESTIMATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    pipe = None
    try:
        cfg = apply_overrides(PipelineConfig.load(args.config), args)
        pipe = Pipeline(cfg)
        stale = pipe.art.path("error.json")
        if stale.exists():
            stale.unlink()
        getattr(pipe, args.stage)()
    except Exception as exc:  # every failure leaves a machine-readable record
        code = _exit_code(exc)
        record = {"stage": args.stage, "error_type": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(f"wlca {args.stage}: {exc}", file=sys.stderr)
        if pipe is not None:
            pipe.art.json("error.json", record)
        else:
            print(json.dumps(record), file=sys.stderr)
        if args.verbose:
            log.exception("stage failed")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
