"""Survey data ingestion, missing-data handling and pre-LCA diagnostics.

Values are stored as a float matrix with ``NaN`` marking missing entries so
that categorical codes (1..R_j) and continuous distal scores share one
container. Every categorical item is validated against its cardinality.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

ROLES = ("indicator", "distal", "covariate", "weight")
DEFAULT_MISSING_CODE = 99


class DataError(ValueError):
    """Raised when input data violate the CSV or schema contract."""


@dataclass(frozen=True)
class ItemSchema:
    """One column of the survey file.

    ``cardinality`` is the number of response categories R_j. Continuous
    distal outcomes and the weight column leave it as ``None``.
    """

    item_id: str
    cardinality: int | None
    role: str = "indicator"
    reverse_coded: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"item {self.item_id!r}: unknown role {self.role!r}")
        if self.cardinality is None:
            if self.role in ("indicator", "covariate"):
                raise DataError(f"item {self.item_id!r}: role {self.role} needs a cardinality")
            if self.reverse_coded:
                raise DataError(f"item {self.item_id!r}: only categorical items can be reverse coded")
        elif int(self.cardinality) < 2:
            raise DataError(f"item {self.item_id!r}: cardinality must be >= 2")

    @property
    def categorical(self) -> bool:
        return self.cardinality is not None

    @classmethod
    def from_dict(cls, d: dict) -> "ItemSchema":
        card = d.get("cardinality")
        return cls(
            item_id=str(d["item_id"]),
            cardinality=None if card is None else int(card),
            role=d.get("role", "indicator"),
            reverse_coded=bool(d.get("reverse_coded", False)),
        )

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "cardinality": self.cardinality,
            "role": self.role,
            "reverse_coded": self.reverse_coded,
        }


def validate_schema(schema: Sequence[ItemSchema]) -> None:
    ids = [it.item_id for it in schema]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise DataError(f"duplicate item ids in schema: {sorted(dup)}")
    n_weight = sum(it.role == "weight" for it in schema)
    if n_weight != 1:
        raise DataError(f"schema must contain exactly one weight item, found {n_weight}")


@dataclass(frozen=True)
class SurveyDataset:
    """Respondents x items, with one survey weight per respondent.

    ``items`` excludes the weight column; ``values[:, j]`` belongs to
    ``items[j]``. Arrays are made read-only on construction.
    """

    items: tuple[ItemSchema, ...]
    values: np.ndarray
    weights: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        items = tuple(self.items)
        values = np.array(self.values, dtype=float, copy=True)
        weights = np.array(self.weights, dtype=float, copy=True).ravel()
        if values.ndim != 2 or values.shape[1] != len(items):
            raise DataError("values must be an n x J matrix matching the item list")
        n = values.shape[0]
        if n == 0:
            raise DataError("dataset has no respondents")
        if weights.shape[0] != n:
            raise DataError("one weight per respondent is required")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise DataError("weights must be positive and finite")
        ids = [it.item_id for it in items]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate item ids")
        for j, it in enumerate(items):
            if not it.categorical:
                continue
            col = values[:, j]
            obs = col[~np.isnan(col)]
            bad = (obs < 1) | (obs > it.cardinality) | (obs != np.round(obs))
            if np.any(bad):
                row = int(np.flatnonzero(~np.isnan(col))[np.flatnonzero(bad)[0]])
                raise DataError(
                    f"row {row}: item {it.item_id!r} has code {col[row]:g} outside 1..{it.cardinality}"
                )
        values.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)
        if self.ids is not None:
            if len(self.ids) != n:
                raise DataError("one id per respondent is required")
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def item_ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def index(self, item_id: str) -> int:
        for j, it in enumerate(self.items):
            if it.item_id == item_id:
                return j
        raise KeyError(f"unknown item {item_id!r}")

    def item(self, item_id: str) -> ItemSchema:
        return self.items[self.index(item_id)]

    def column(self, item_id: str) -> np.ndarray:
        return self.values[:, self.index(item_id)]

    def items_with_role(self, role: str) -> list[str]:
        return [it.item_id for it in self.items if it.role == role]

    @property
    def indicators(self) -> list[str]:
        return self.items_with_role("indicator")

    def codes(self, item_ids: Sequence[str]) -> np.ndarray:
        """Integer codes for complete categorical columns (raises on missing)."""
        idx = [self.index(i) for i in item_ids]
        block = self.values[:, idx]
        if np.isnan(block).any():
            raise DataError("missing values present on requested items")
        return block.astype(np.int64)

    def cardinalities(self, item_ids: Sequence[str]) -> list[int]:
        out = []
        for i in item_ids:
            card = self.item(i).cardinality
            if card is None:
                raise DataError(f"item {i!r} is not categorical")
            out.append(card)
        return out

    def subset(self, rows) -> "SurveyDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        ids = None if self.ids is None else tuple(self.ids[i] for i in rows)
        return SurveyDataset(self.items, self.values[rows], self.weights[rows], ids)

    def with_weights(self, weights) -> "SurveyDataset":
        return SurveyDataset(self.items, self.values, weights, self.ids)

    def select_items(self, item_ids: Sequence[str]) -> "SurveyDataset":
        idx = [self.index(i) for i in item_ids]
        return SurveyDataset(tuple(self.items[j] for j in idx), self.values[:, idx], self.weights, self.ids)


@dataclass(frozen=True)
class DeletionReport:
    n_before: int
    n_after: int
    retention_rate: float
    per_item_missing: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SparsenessReport:
    theoretical_cells: int
    observed_patterns: int
    sparseness_ratio: float


def _reverse(code: float, cardinality: int) -> float:
    return cardinality + 1 - code


def load_dataset(
    path,
    schema: Sequence[ItemSchema],
    id_column: str | None = None,
    missing_code: int | None = DEFAULT_MISSING_CODE,
    columns: dict | None = None,
) -> SurveyDataset:
    """Read a UTF-8 CSV file into a validated :class:`SurveyDataset`.

    Empty fields and ``missing_code`` are read as missing. Reverse-coded
    items are flipped with ``r -> R_j + 1 - r`` so that higher codes always
    mean greater concern. ``columns`` maps item ids to CSV header names
    where the two differ.
    """
    columns = dict(columns or {})
    schema = list(schema)
    validate_schema(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    weight_item = next(it for it in schema if it.role == "weight")
    items = [it for it in schema if it.role != "weight"]

    with path.open(newline="", encoding="utf-8") as fh:
        lines = list(fh)
        skip = 0
        while skip < len(lines) and lines[skip].startswith("#"):
            skip += 1  # leading comment lines (artifact stamps)
        reader = csv.reader(lines[skip:])
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        needed = [columns.get(it.item_id, it.item_id) for it in schema] + ([id_column] if id_column else [])
        missing_cols = [c for c in needed if c not in header]
        if missing_cols:
            raise DataError(f"{path}: columns not found in header: {missing_cols}")
        pos = {h: k for k, h in enumerate(header)}
        col_of = {it.item_id: pos[columns.get(it.item_id, it.item_id)] for it in schema}
        if id_column:
            col_of[id_column] = pos[id_column]

        values, weights, ids = [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=skip + 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            if id_column:
                rid = row[col_of[id_column]].strip()
                if rid in seen:
                    raise DataError(f"row {lineno}: duplicate respondent id {rid!r}")
                seen.add(rid)
                ids.append(rid)
            raw_w = row[col_of[weight_item.item_id]].strip()
            try:
                w = float(raw_w)
            except ValueError:
                raise DataError(f"row {lineno}: column {weight_item.item_id!r}: missing or non-numeric weight {raw_w!r}") from None
            if not math.isfinite(w) or w <= 0:
                raise DataError(f"row {lineno}: column {weight_item.item_id!r}: weight must be positive, got {raw_w!r}")
            weights.append(w)

            rec = []
            for it in items:
                cell = row[col_of[it.item_id]].strip()
                if cell == "":
                    rec.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {lineno}: column {it.item_id!r}: malformed value {cell!r}") from None
                if missing_code is not None and v == missing_code and it.categorical:
                    rec.append(math.nan)
                    continue
                if it.categorical:
                    if v != int(v) or not 1 <= v <= it.cardinality:
                        raise DataError(
                            f"row {lineno}: column {it.item_id!r}: code {cell} outside 1..{it.cardinality}"
                        )
                    if it.reverse_coded:
                        v = _reverse(v, it.cardinality)
                rec.append(v)
            values.append(rec)

    if not values:
        raise DataError(f"{path}: no data rows")
    return SurveyDataset(tuple(items), np.array(values, dtype=float), np.array(weights), tuple(ids) if id_column else None)


def write_dataset(dataset: SurveyDataset, path, weight_column: str = "weight", extra: dict | None = None,
                  comment: str | None = None) -> None:
    """Write a dataset in the CSV contract (missing as empty fields).

    Reverse-coded items are written back in their raw orientation so that
    ``load_dataset`` round-trips.
    """
    extra = extra or {}
    header = ["respondent_id"] + dataset.item_ids + [weight_column] + list(extra)
    ids = dataset.ids or tuple(str(i + 1) for i in range(dataset.n))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            row = [ids[i]]
            for j, it in enumerate(dataset.items):
                v = dataset.values[i, j]
                if np.isnan(v):
                    row.append("")
                elif it.categorical:
                    row.append(str(int(_reverse(v, it.cardinality) if it.reverse_coded else v)))
                else:
                    row.append(repr(float(v)))
            row.append(repr(float(dataset.weights[i])))
            row.extend(str(col[i]) for col in extra.values())
            w.writerow(row)


def listwise_delete(dataset: SurveyDataset, items: Sequence[str]) -> tuple[SurveyDataset, DeletionReport]:
    """Drop respondents with any missing value on ``items``.

    Missingness on the remaining columns is left as is.
    """
    idx = [dataset.index(i) for i in items]
    block = np.isnan(dataset.values[:, idx])
    per_item = {item: int(block[:, k].sum()) for k, item in enumerate(items)}
    keep = ~block.any(axis=1)
    n_after = int(keep.sum())
    if n_after == 0:
        raise DataError("listwise deletion removed every respondent")
    out = dataset if n_after == dataset.n else dataset.subset(keep)
    report = DeletionReport(dataset.n, n_after, n_after / dataset.n, per_item)
    return out, report


def kish_effective_n(weights: Iterable[float]) -> tuple[float, float]:
    """Kish effective sample size (sum w)^2 / sum w^2 and the design effect n / n_eff."""
    w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=float)
    if w.size == 0:
        raise DataError("empty weight list")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DataError("weights must be positive and finite")
    n_eff = w.sum() ** 2 / np.sum(w * w)
    return float(n_eff), float(w.size / n_eff)


def weighted_crosstab(a: np.ndarray, b: np.ndarray, weights: np.ndarray, ra: int, rb: int) -> np.ndarray:
    table = np.zeros((ra, rb))
    np.add.at(table, (a.astype(int) - 1, b.astype(int) - 1), weights)
    return table


@dataclass(frozen=True)
class CramersVResult:
    items: tuple[str, ...]
    v: np.ndarray
    p: np.ndarray
    n_eff: float


def _bias_corrected_v(table: np.ndarray, n: float) -> tuple[float, float]:
    """Bergsma's bias-corrected Cramer's V and phi^2 from a (possibly weighted) table.

    ``n`` is the sample size entering the small-sample correction.
    """
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    keep_r, keep_c = rows > 0, cols > 0
    table = table[keep_r][:, keep_c]
    r, c = table.shape
    if r < 2 or c < 2:
        raise DataError("Cramer's V is undefined for an item with a single observed category")
    p = table / table.sum()
    expected = np.outer(p.sum(axis=1), p.sum(axis=0))
    phi2 = float(np.sum((p - expected) ** 2 / expected))
    phi2_tilde = max(0.0, phi2 - (r - 1) * (c - 1) / (n - 1))
    r_tilde = r - (r - 1) ** 2 / (n - 1)
    c_tilde = c - (c - 1) ** 2 / (n - 1)
    denom = min(r_tilde - 1, c_tilde - 1)
    v = math.sqrt(phi2_tilde / denom) if denom > 0 else 0.0
    return min(v, 1.0), phi2


def cramers_v_matrix(dataset: SurveyDataset, items: Sequence[str]) -> CramersVResult:
    """Pairwise bias-corrected weighted Cramer's V with Rao-Scott p-values.

    Tables are built from survey weights. The bias correction uses the Kish
    effective n; the p-value divides the weighted Pearson chi-square (on
    the n scale) by the design effect, i.e. ``X2 = phi^2 * n_eff``.
    """
    items = list(items)
    if len(items) < 2:
        raise DataError("at least two items are required")
    cards = dataset.cardinalities(items)
    J = len(items)
    v = np.eye(J)
    pv = np.zeros((J, J))
    for a in range(J):
        for b in range(a + 1, J):
            ca, cb = dataset.column(items[a]), dataset.column(items[b])
            ok = ~(np.isnan(ca) | np.isnan(cb))
            w = dataset.weights[ok]
            n_eff, _ = kish_effective_n(w)
            table = weighted_crosstab(ca[ok], cb[ok], w, cards[a], cards[b])
            if (table.sum(axis=1) > 0).sum() < 2:
                raise DataError(f"item {items[a]!r} has a single observed category")
            if (table.sum(axis=0) > 0).sum() < 2:
                raise DataError(f"item {items[b]!r} has a single observed category")
            vab, phi2 = _bias_corrected_v(table, n_eff)
            r = int((table.sum(axis=1) > 0).sum())
            c = int((table.sum(axis=0) > 0).sum())
            pab = float(stats.chi2.sf(phi2 * n_eff, (r - 1) * (c - 1)))
            v[a, b] = v[b, a] = vab
            pv[a, b] = pv[b, a] = pab
    n_eff_all, _ = kish_effective_n(dataset.weights)
    return CramersVResult(tuple(items), v, pv, n_eff_all)


def sparseness_report(dataset: SurveyDataset, items: Sequence[str]) -> SparsenessReport:
    items = list(items)
    if not items:
        raise DataError("items must be non-empty")
    cells = math.prod(dataset.cardinalities(items))
    block = dataset.values[:, [dataset.index(i) for i in items]]
    block = block[~np.isnan(block).any(axis=1)]
    observed = int(np.unique(block, axis=0).shape[0]) if block.size else 0
    return SparsenessReport(cells, observed, 1.0 - observed / cells)


def normalized_weights(weights: np.ndarray) -> np.ndarray:
    """Rescale weights to sum to the row count."""
    w = np.asarray(weights, dtype=float)
    return w * (w.size / w.sum())
