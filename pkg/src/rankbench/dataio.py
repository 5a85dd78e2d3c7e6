"""Response tables, feature matrices, label maps and their CSV formats.

All ids are trimmed of surrounding whitespace and compared case-sensitively.
Tables are kept sorted by (drug_id, cell_id) so every downstream result is
independent of input row order.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DataError, ParseError, SchemaError, UsageError

UNITS = ("lnIC50", "AUC")


def _ids(values):
    return np.array([str(v).strip() for v in values], dtype=str)


class _KeyedTable:
    """Sparse (drug, cell) -> value records, sorted by key."""

    def __init__(self, drug_ids, cell_ids, values):
        self.drug_ids = _ids(drug_ids)
        self.cell_ids = _ids(cell_ids)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if not (len(self.drug_ids) == len(self.cell_ids) == len(self.values)):
            raise UsageError("drug_ids, cell_ids and values differ in length")
        if len(self.values) == 0:
            raise DataError("empty table")
        if not np.all(np.isfinite(self.values)):
            raise DataError("table contains non-finite values")

    def _sort(self):
        order = np.lexsort((self.cell_ids, self.drug_ids))
        self.drug_ids = self.drug_ids[order]
        self.cell_ids = self.cell_ids[order]
        self.values = self.values[order]
        return order

    def _duplicate_mask(self):
        """True where a record repeats the previous key (table must be sorted)."""
        dup = np.zeros(len(self.values), dtype=bool)
        dup[1:] = (self.drug_ids[1:] == self.drug_ids[:-1]) & (self.cell_ids[1:] == self.cell_ids[:-1])
        return dup

    def __len__(self):
        return len(self.values)

    @property
    def n_records(self):
        return len(self.values)

    @cached_property
    def drugs(self):
        return tuple(np.unique(self.drug_ids).tolist())

    @cached_property
    def cells(self):
        return tuple(np.unique(self.cell_ids).tolist())

    @cached_property
    def key_index(self):
        return {k: i for i, k in enumerate(zip(self.drug_ids.tolist(), self.cell_ids.tolist()))}

    @cached_property
    def drug_slices(self):
        """drug_id -> slice into the (drug-sorted) record arrays."""
        out = {}
        if len(self.drug_ids) == 0:
            return out
        starts = np.flatnonzero(np.r_[True, self.drug_ids[1:] != self.drug_ids[:-1]])
        ends = np.r_[starts[1:], len(self.drug_ids)]
        for s, e in zip(starts, ends):
            out[str(self.drug_ids[s])] = slice(int(s), int(e))
        return out

    def records(self):
        return list(zip(self.drug_ids.tolist(), self.cell_ids.tolist(), self.values.tolist()))

    def keys(self):
        return list(zip(self.drug_ids.tolist(), self.cell_ids.tolist()))

    def drug_values(self, drug_id):
        """(cell_ids, values) for one drug."""
        sl = self.drug_slices[drug_id]
        return self.cell_ids[sl], self.values[sl]

    def _take(self, mask):
        mask = np.asarray(mask)
        return self._rebuild(self.drug_ids[mask], self.cell_ids[mask], self.values[mask])

    def restrict(self, drugs=None, cells=None):
        mask = np.ones(len(self), dtype=bool)
        if drugs is not None:
            mask &= np.isin(self.drug_ids, np.array(sorted(drugs), dtype=str))
        if cells is not None:
            mask &= np.isin(self.cell_ids, np.array(sorted(cells), dtype=str))
        if not mask.any():
            raise DataError("restriction leaves no records")
        return self._take(mask)

    def exclude(self, drugs=None, cells=None):
        mask = np.ones(len(self), dtype=bool)
        if drugs is not None:
            mask &= ~np.isin(self.drug_ids, np.array(sorted(drugs), dtype=str))
        if cells is not None:
            mask &= ~np.isin(self.cell_ids, np.array(sorted(cells), dtype=str))
        if not mask.any():
            raise DataError("exclusion leaves no records")
        return self._take(mask)

    def with_values(self, values):
        return self._rebuild(self.drug_ids, self.cell_ids, values)

    def to_matrix(self, drugs=None, cells=None):
        """Dense (drugs x cells) array with NaN for unobserved pairs, plus the mask."""
        drugs = list(self.drugs if drugs is None else drugs)
        cells = list(self.cells if cells is None else cells)
        di = {d: i for i, d in enumerate(drugs)}
        ci = {c: i for i, c in enumerate(cells)}
        Y = np.full((len(drugs), len(cells)), np.nan)
        for d, c, v in zip(self.drug_ids.tolist(), self.cell_ids.tolist(), self.values.tolist()):
            i, j = di.get(d), ci.get(c)
            if i is not None and j is not None:
                Y[i, j] = v
        return Y, ~np.isnan(Y)

    def equals(self, other):
        return (
            type(self) is type(other)
            and np.array_equal(self.drug_ids, other.drug_ids)
            and np.array_equal(self.cell_ids, other.cell_ids)
            and np.array_equal(self.values, other.values)
        )


class ResponseTable(_KeyedTable):
    """Drug response observations in ln(IC50) or AUC units.

    Duplicate (drug, cell) pairs are averaged; ``report`` records which.
    """

    def __init__(self, drug_ids, cell_ids, values, units="lnIC50", report=None):
        super().__init__(drug_ids, cell_ids, values)
        if units not in UNITS:
            raise UsageError(f"units must be one of {UNITS}, got {units!r}")
        self.units = units
        n_in = len(self.values)
        self._sort()
        dup = self._duplicate_mask()
        averaged = []
        if dup.any():
            starts = np.flatnonzero(~dup)
            sums = np.add.reduceat(self.values, starts)
            counts = np.diff(np.r_[starts, len(self.values)])
            for s, n in zip(starts, counts):
                if n > 1:
                    averaged.append([str(self.drug_ids[s]), str(self.cell_ids[s]), int(n)])
            self.drug_ids = self.drug_ids[starts]
            self.cell_ids = self.cell_ids[starts]
            self.values = sums / counts
        self.report = {"n_input_rows": n_in, "n_records": len(self.values), "averaged": averaged}
        if report:
            self.report.update(report)

    def _rebuild(self, drug_ids, cell_ids, values):
        return ResponseTable(drug_ids, cell_ids, values, units=self.units)

    @classmethod
    def from_matrix(cls, drugs, cells, Y, mask=None, units="lnIC50"):
        Y = np.asarray(Y, dtype=float)
        if mask is None:
            mask = ~np.isnan(Y)
        ii, jj = np.nonzero(mask)
        drugs = np.asarray(drugs, dtype=str)
        cells = np.asarray(cells, dtype=str)
        return cls(drugs[ii], cells[jj], Y[ii, jj], units=units)

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        return cls(
            np.concatenate([t.drug_ids for t in tables]),
            np.concatenate([t.cell_ids for t in tables]),
            np.concatenate([t.values for t in tables]),
            units=tables[0].units,
        )

    def validate(self):
        if len(self.drugs) < 1 or len(self.cells) < 2:
            raise DataError(
                f"response table needs >= 1 drug and >= 2 cells, got {len(self.drugs)} and {len(self.cells)}"
            )
        return self


class PredictionTable(_KeyedTable):
    """Predicted values keyed like a ResponseTable; keys must be unique.

    ``fallback`` flags records that came from a predictor's fallback path
    (unseen entity, uncovered matching cell, ...).
    """

    def __init__(self, drug_ids, cell_ids, values, fallback=None):
        super().__init__(drug_ids, cell_ids, values)
        fb = np.zeros(len(self.values), dtype=bool) if fallback is None else np.asarray(fallback, dtype=bool)
        if fb.shape != self.values.shape:
            raise UsageError("fallback flags must match records")
        order = self._sort()
        self.fallback = fb[order]
        if self._duplicate_mask().any():
            raise DataError("prediction table has duplicate (drug, cell) keys")

    @property
    def predicted(self):
        return self.values

    def _take(self, mask):
        mask = np.asarray(mask)
        return PredictionTable(self.drug_ids[mask], self.cell_ids[mask], self.values[mask], self.fallback[mask])

    def _rebuild(self, drug_ids, cell_ids, values):
        return PredictionTable(drug_ids, cell_ids, values)

    def with_values(self, values):
        return PredictionTable(self.drug_ids, self.cell_ids, values, self.fallback)

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        return cls(
            np.concatenate([t.drug_ids for t in tables]),
            np.concatenate([t.cell_ids for t in tables]),
            np.concatenate([t.values for t in tables]),
            np.concatenate([t.fallback for t in tables]),
        )


@dataclass(eq=False)
class FeatureMatrix:
    entity_ids: tuple
    feature_names: tuple
    values: np.ndarray
    kind: str = "cell"
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entity_ids = tuple(str(e).strip() for e in self.entity_ids)
        self.feature_names = tuple(str(f).strip() for f in self.feature_names)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.entity_ids), len(self.feature_names))
        if self.kind not in ("cell", "drug"):
            raise UsageError(f"kind must be 'cell' or 'drug', got {self.kind!r}")
        if len(set(self.entity_ids)) != len(self.entity_ids):
            raise SchemaError("duplicate entity ids in feature matrix")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("duplicate feature names in feature matrix")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    @cached_property
    def row_index(self):
        return {e: i for i, e in enumerate(self.entity_ids)}

    def rows(self, ids):
        idx = self.row_index
        try:
            return self.values[[idx[i] for i in ids]]
        except KeyError as exc:
            raise DataError(f"entity {exc.args[0]!r} missing from {self.kind} features") from None

    def select(self, ids):
        ids = list(ids)
        return FeatureMatrix(tuple(ids), self.feature_names, self.rows(ids), self.kind)

    def columns(self, prefix):
        """Sub-matrix of features named ``<prefix>:...``."""
        keep = [i for i, f in enumerate(self.feature_names) if f.startswith(prefix + ":")]
        if not keep:
            raise SchemaError(f"no features with modality prefix {prefix!r}")
        names = tuple(self.feature_names[i] for i in keep)
        return FeatureMatrix(self.entity_ids, names, self.values[:, keep], self.kind)

    @property
    def modalities(self):
        """Ordered modality prefixes ('' for unprefixed features)."""
        seen = []
        for f in self.feature_names:
            p = f.split(":", 1)[0] if ":" in f else ""
            if p not in seen:
                seen.append(p)
        return seen

    def with_prefix(self, prefix):
        return FeatureMatrix(self.entity_ids, tuple(f"{prefix}:{f}" for f in self.feature_names), self.values, self.kind, dict(self.report))

    @classmethod
    def hstack(cls, mats):
        """Join matrices column-wise on their common entities (sorted)."""
        mats = list(mats)
        common = sorted(set.intersection(*(set(m.entity_ids) for m in mats)))
        values = np.hstack([m.rows(common) for m in mats])
        names = tuple(n for m in mats for n in m.feature_names)
        report = {"imputed_values": sum(m.report.get("imputed_values", 0) for m in mats)}
        return cls(tuple(common), names, values, mats[0].kind, report)

    def equals(self, other):
        return (
            self.entity_ids == other.entity_ids
            and self.feature_names == other.feature_names
            and self.kind == other.kind
            and np.array_equal(self.values, other.values)
        )


class _LabelMap:
    """drug_id -> label, closed vocabulary."""

    def __init__(self, labels):
        self.labels = {str(k).strip(): str(v).strip() for k, v in dict(labels).items()}
        if not self.labels:
            raise DataError(f"empty {type(self).__name__}")

    def __getitem__(self, drug):
        return self.labels[drug]

    def __contains__(self, drug):
        return drug in self.labels

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return type(self) is type(other) and self.labels == other.labels

    def get(self, drug, default=None):
        return self.labels.get(drug, default)

    @property
    def drugs(self):
        return tuple(sorted(self.labels))

    @property
    def classes(self):
        return tuple(sorted(set(self.labels.values())))

    def members(self, label):
        return tuple(sorted(d for d, v in self.labels.items() if v == label))

    def class_sizes(self):
        sizes = {}
        for v in self.labels.values():
            sizes[v] = sizes.get(v, 0) + 1
        return dict(sorted(sizes.items()))

    def restrict(self, drugs):
        drugs = set(drugs)
        return type(self)({d: v for d, v in self.labels.items() if d in drugs})


class MoaMap(_LabelMap):
    header = ("drug_id", "moa_class")


class ScaffoldMap(_LabelMap):
    header = ("drug_id", "scaffold_id")


@dataclass(eq=False)
class AlignedDataset:
    response: ResponseTable
    cell_features: FeatureMatrix
    drug_features: FeatureMatrix = None
    moa: MoaMap = None
    scaffold: ScaffoldMap = None
    report: dict = field(default_factory=dict)

    @property
    def drugs(self):
        return self.response.drugs

    @property
    def cells(self):
        return self.response.cells


# ---------------------------------------------------------------- loaders


def _open_csv(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    return fh


def _parse_float(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {column!r}", row=row) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r} in column {column!r}", row=row)
    return v


def load_response_table(path, columns=None, units="lnIC50"):
    """Read a response CSV (default header ``drug_id,cell_id,value``).

    ``columns`` remaps the logical names ``drug``, ``cell``, ``value`` to header
    names. Rows are numbered from 2 (line 1 is the header) in error messages.
    """
    cols = {"drug": "drug_id", "cell": "cell_id", "value": "value"}
    cols.update(columns or {})
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        drugs, cells, values = [], [], []
        for row_no, row in enumerate(reader, start=2):
            drugs.append(row[cols["drug"]])
            cells.append(row[cols["cell"]])
            values.append(_parse_float((row[cols["value"]] or "").strip(), row_no, cols["value"]))
    if not values:
        raise DataError(f"{path}: empty response table")
    return ResponseTable(drugs, cells, values, units=units).validate()


def load_prediction_table(path):
    """Read ``drug_id,cell_id,predicted``."""
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        for c in ("drug_id", "cell_id", "predicted"):
            if c not in header:
                raise SchemaError(f"{path}: missing column {c!r}")
        drugs, cells, values = [], [], []
        for row_no, row in enumerate(reader, start=2):
            drugs.append(row["drug_id"])
            cells.append(row["cell_id"])
            values.append(_parse_float((row["predicted"] or "").strip(), row_no, "predicted"))
    if not values:
        raise DataError(f"{path}: empty prediction table")
    return PredictionTable(drugs, cells, values)


def load_feature_matrix(path, kind="cell"):
    """Read ``id,<feature1>,...``; empty fields are imputed with the column mean.

    Columns with no observed value are dropped and listed in the report.
    """
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty feature file") from None
        if len(header) < 2:
            raise SchemaError(f"{path}: need an id column and at least one feature")
        ids, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", row=row_no)
            ids.append(row[0].strip())
            rows.append([np.nan if not f.strip() else _parse_float(f.strip(), row_no, header[j + 1]) for j, f in enumerate(row[1:])])
    if not ids:
        raise DataError(f"{path}: no feature rows")
    seen = set()
    for e in ids:
        if e in seen:
            raise SchemaError(f"{path}: duplicate entity id {e!r}")
        seen.add(e)
    X = np.array(rows, dtype=float)
    names = header[1:]
    missing = np.isnan(X)
    all_missing = missing.all(axis=0)
    dropped = [names[j] for j in np.flatnonzero(all_missing)]
    if dropped:
        warnings.warn(f"{path}: dropping all-missing feature column(s) {dropped}", stacklevel=2)
        X = X[:, ~all_missing]
        missing = missing[:, ~all_missing]
        names = [n for n, m in zip(names, all_missing) if not m]
    n_imputed = int(missing.sum())
    if n_imputed:
        means = np.nanmean(X, axis=0)
        X = np.where(missing, means[None, :], X)
    report = {"imputed_values": n_imputed, "dropped_columns": dropped}
    return FeatureMatrix(tuple(ids), tuple(names), X, kind, report)


def _load_label_map(path, cls):
    key, label = cls.header
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        if key not in header or label not in header:
            raise SchemaError(f"{path}: expected header {key},{label}")
        labels = {}
        for row_no, row in enumerate(reader, start=2):
            d = row[key].strip()
            if d in labels:
                raise SchemaError(f"{path}: duplicate drug id {d!r}")
            if not (row[label] or "").strip():
                raise ParseError(f"{path}: empty label for {d!r}", row=row_no)
            labels[d] = row[label].strip()
    return cls(labels)


def load_moa_map(path):
    return _load_label_map(path, MoaMap)


def load_scaffold_map(path):
    return _load_label_map(path, ScaffoldMap)


def load_mutation_status(path):
    """``cell_id,status`` with status in {0, 1}."""
    with _open_csv(path) as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        if "cell_id" not in header or "status" not in header:
            raise SchemaError(f"{path}: expected header cell_id,status")
        status = {}
        for row_no, row in enumerate(reader, start=2):
            s = (row["status"] or "").strip()
            if s not in ("0", "1"):
                raise ParseError(f"{path}: status must be 0 or 1, got {s!r}", row=row_no)
            status[row["cell_id"].strip()] = int(s)
    return status


# ---------------------------------------------------------------- writers


def _fmt(v):
    return repr(float(v))


def save_response_table(table, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["drug_id", "cell_id", "value"])
        for d, c, v in table.records():
            w.writerow([d, c, _fmt(v)])


def save_prediction_table(table, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["drug_id", "cell_id", "predicted"])
        for d, c, v in table.records():
            w.writerow([d, c, _fmt(v)])


def save_feature_matrix(fm, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *fm.feature_names])
        for e, row in zip(fm.entity_ids, fm.values):
            w.writerow([e, *(_fmt(v) for v in row)])


def save_label_map(m, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(m.header))
        for d in m.drugs:
            w.writerow([d, m[d]])


# ---------------------------------------------------------------- alignment


def _restrict_labels(m, drugs):
    if m is None:
        return None
    drugs = set(drugs)
    if not drugs & set(m.labels):
        return None
    return m.restrict(drugs)


def align(response, cell_features, drug_features=None, moa=None, scaffold=None):
    """Intersect a response table with its feature sources.

    Records on cells without a feature row are dropped, and likewise for drugs
    when drug features are supplied. Ids come out in lexicographic order.
    """
    cells_ok = set(cell_features.entity_ids)
    keep = np.isin(response.cell_ids, np.array(sorted(cells_ok), dtype=str))
    dropped_cells = sorted(set(response.cells) - cells_ok)
    dropped_drugs = []
    if drug_features is not None:
        drugs_ok = set(drug_features.entity_ids)
        dropped_drugs = sorted(set(response.drugs) - drugs_ok)
        keep &= np.isin(response.drug_ids, np.array(sorted(drugs_ok), dtype=str))
    if not keep.any():
        raise DataError("alignment leaves no records: response and features share no ids")
    dropped_records = int((~keep).sum())
    resp = response._take(keep) if dropped_records else response
    cf = cell_features.select(resp.cells)
    cf.report = dict(cell_features.report)
    df = None
    if drug_features is not None:
        df = drug_features.select(resp.drugs)
        df.report = dict(drug_features.report)
    imputed = cell_features.report.get("imputed_values", 0)
    if drug_features is not None:
        imputed += drug_features.report.get("imputed_values", 0)
    report = {
        "n_drugs": len(resp.drugs),
        "n_cells": len(resp.cells),
        "n_records": resp.n_records,
        "dropped_records": dropped_records,
        "imputed_values": int(imputed),
        "dropped_cells": dropped_cells,
        "dropped_drugs": dropped_drugs,
    }
    return AlignedDataset(
        response=resp,
        cell_features=cf,
        drug_features=df,
        moa=_restrict_labels(moa, resp.drugs),
        scaffold=_restrict_labels(scaffold, resp.drugs),
        report=report,
    )
