"""Behavior datasets: tallying invocation records, reversible encodings, train/test splits."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DatasetError, DatasetWarning
from .structure import DataType

MIN_ROWS = 20
MAX_ROWS = 10000
TEST_FRACTION = 0.10
DISCRETE_THRESHOLD = 16
PRESENCE_THRESHOLD = 0.90


@dataclass
class BehaviorDataset:
    node: int
    columns: list  # FeatureColumnSpec, retained columns only
    condition_values: np.ndarray  # caller symbol per row
    data: dict  # column id -> 1-D array (float64 for Number, object for Text)
    seed: int = 0
    eligible: bool = True
    reason: str = ""
    dropped_columns: list = field(default_factory=list)
    condition_domain: tuple = ()

    @property
    def row_count(self):
        return len(self.condition_values)

    @property
    def column_count(self):
        return len(self.columns)

    @property
    def rows(self):
        ids = [c.id for c in self.columns]
        return [[self.data[c][i] for c in ids] for i in range(self.row_count)]

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return {c.id: self.data[c.id][index] for c in self.columns}, self.condition_values[index]


def _column_array(values, dtype):
    if dtype is DataType.NUMBER:
        return np.asarray(values, dtype=np.float64)
    arr = np.empty(len(values), dtype=object)
    arr[:] = [str(v) for v in values]
    return arr


def tally(records, spec, seed=0, min_rows=MIN_ROWS, max_rows=MAX_ROWS):
    """Build the raw table of one executable node from its invocation records."""
    recs = [r for r in records if r.node == spec.node]
    n = len(recs)
    kept, dropped = [], []
    for col in spec.columns:
        present = sum(1 for r in recs if col.id in r.row)
        if n and present / n >= PRESENCE_THRESHOLD:
            kept.append(col)
        else:
            dropped.append(col.id)
    if dropped and n:
        warnings.warn(f"node {spec.node}: dropping sparse columns {dropped}", DatasetWarning, stacklevel=2)
    complete = [r for r in recs if all(c.id in r.row for c in kept)]
    if len(complete) > max_rows:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(complete), size=max_rows, replace=False))
        complete = [complete[i] for i in pick]
    data = {c.id: _column_array([r.row[c.id] for r in complete], c.data_type) for c in kept}
    callers = np.asarray([r.caller for r in complete], dtype=np.int64)
    ds = BehaviorDataset(spec.node, kept, callers, data, seed, dropped_columns=dropped,
                         condition_domain=tuple(spec.condition_domain))
    if not kept:
        ds.eligible, ds.reason = False, "no data columns"
    elif ds.row_count < min_rows:
        ds.eligible, ds.reason = False, f"{ds.row_count} rows < {min_rows}"
    return ds


def split_indices(n, seed, test_fraction=TEST_FRACTION):
    """Seeded disjoint (train, test) index arrays; |test| = round(fraction * n)."""
    n_test = int(np.floor(test_fraction * n + 0.5))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7919])).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# -- encodings ---------------------------------------------------------------


class Mode(str, Enum):
    CONTINUOUS = "ContinuousStandardized"
    DISCRETE = "DiscreteBase10"


def digit_width(max_index):
    return max(1, len(str(int(max_index))))


@dataclass
class ColumnEncoding:
    column_id: str
    mode: Mode
    data_type: DataType = DataType.NUMBER
    mean: float = 0.0
    std: float = 1.0
    categories: tuple = ()
    digit_width: int = 1
    digit_mean: tuple = ()
    digit_std: tuple = ()

    @property
    def width(self):
        return 1 if self.mode is Mode.CONTINUOUS else self.digit_width

    @property
    def unseen_index(self):
        return len(self.categories)

    def index_of(self, values):
        """Category indices; values outside the table get the reserved unseen index."""
        lookup = {v: i for i, v in enumerate(self.categories)}
        return np.asarray([lookup.get(_key(v, self.data_type), self.unseen_index) for v in values], dtype=np.int64)

    def digits(self, index):
        index = np.asarray(index, dtype=np.int64)
        powers = 10 ** np.arange(self.digit_width - 1, -1, -1)
        return (index[:, None] // powers[None, :]) % 10

    def encode(self, values):
        if self.mode is Mode.CONTINUOUS:
            x = np.asarray(values, dtype=np.float64)
            return ((x - self.mean) / self.std)[:, None]
        d = self.digits(self.index_of(values)).astype(np.float64)
        return (d - np.asarray(self.digit_mean)) / np.asarray(self.digit_std)

    def decode(self, z):
        """Raw values plus a per-row flag marking indices clamped back into range."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.mode is Mode.CONTINUOUS:
            return z[:, 0] * self.std + self.mean, np.zeros(len(z), dtype=bool)
        d = z * np.asarray(self.digit_std) + np.asarray(self.digit_mean)
        d = np.clip(np.rint(d), 0, 9).astype(np.int64)
        powers = 10 ** np.arange(self.digit_width - 1, -1, -1)
        idx = d @ powers
        n_real = len(self.categories)
        flag = idx >= n_real
        idx = np.minimum(idx, n_real - 1)
        out = np.empty(len(idx), dtype=object if self.data_type is not DataType.NUMBER else np.float64)
        cats = np.asarray(self.categories, dtype=out.dtype)
        out[:] = cats[idx]
        return out, flag

    def to_json(self):
        return {
            "column": self.column_id,
            "mode": self.mode.value,
            "dataType": self.data_type.value,
            "mean": self.mean,
            "std": self.std,
            "categories": list(self.categories),
            "digitWidth": self.digit_width,
            "digitMean": list(self.digit_mean),
            "digitStd": list(self.digit_std),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            obj["column"],
            Mode(obj["mode"]),
            DataType(obj["dataType"]),
            obj["mean"],
            obj["std"],
            tuple(obj["categories"]),
            obj["digitWidth"],
            tuple(obj["digitMean"]),
            tuple(obj["digitStd"]),
        )


def _key(v, dtype):
    if dtype is DataType.NUMBER:
        return float(v)
    if dtype is DataType.TEXT:
        return str(v)
    return int(v)


def _discrete(column_id, dtype, train_values, categories=None):
    if categories is None:
        categories = sorted({_key(v, dtype) for v in train_values})
    enc = ColumnEncoding(column_id, Mode.DISCRETE, dtype, categories=tuple(categories),
                         digit_width=digit_width(len(categories)))
    d = enc.digits(enc.index_of(train_values)).astype(np.float64)
    mu = d.mean(axis=0) if len(d) else np.zeros(enc.digit_width)
    sd = d.std(axis=0) if len(d) else np.ones(enc.digit_width)
    # constant digit positions keep unit scale
    sd = np.where(sd > 0, sd, 1.0)
    enc.digit_mean, enc.digit_std = tuple(float(x) for x in mu), tuple(float(x) for x in sd)
    return enc


@dataclass
class EncodingSet:
    """Encodings of the data columns plus the caller conditional.

    ``constants`` maps columns that were constant in training to their value;
    they take no flow dimensions but are reported on decoded samples.
    """

    columns: list
    condition: ColumnEncoding
    constants: dict = field(default_factory=dict)

    @property
    def dim(self):
        return sum(e.width for e in self.columns)

    @property
    def cond_dim(self):
        return self.condition.width

    @property
    def column_ids(self):
        return [e.column_id for e in self.columns]

    def __getitem__(self, column_id):
        for e in self.columns:
            if e.column_id == column_id:
                return e
        raise KeyError(column_id)

    def slices(self):
        out, start = {}, 0
        for e in self.columns:
            out[e.column_id] = slice(start, start + e.width)
            start += e.width
        return out

    def encode(self, data, callers=None):
        """Encode a column table (and callers) into (X, C) matrices."""
        missing = [c for c in self.column_ids if c not in data]
        if missing:
            raise DatasetError(f"rows lack columns {missing}")
        n = len(data[self.column_ids[0]]) if self.columns else len(callers)
        x = np.hstack([e.encode(data[e.column_id]) for e in self.columns]) if self.columns else np.zeros((n, 0))
        c = self.condition.encode(callers) if callers is not None else None
        return x, c

    def digit_steps(self):
        out = []
        for e in self.columns:
            out.extend([0.0] if e.mode is Mode.CONTINUOUS else [1.0 / s for s in e.digit_std])
        return np.asarray(out)

    def encode_callers(self, callers):
        return self.condition.encode(callers)

    def decode(self, x):
        """Decode an encoded matrix into a column table and a per-row clamp flag."""
        x = np.atleast_2d(x)
        table, flag = {}, np.zeros(len(x), dtype=bool)
        for cid, sl in self.slices().items():
            table[cid], f = self[cid].decode(x[:, sl])
            flag |= f
        for cid, v in self.constants.items():
            table[cid] = np.full(len(x), v)
        return table, flag

    def to_json(self):
        return {"columns": [e.to_json() for e in self.columns], "condition": self.condition.to_json(),
                "constants": self.constants}

    @classmethod
    def from_json(cls, obj):
        return cls([ColumnEncoding.from_json(o) for o in obj["columns"]], ColumnEncoding.from_json(obj["condition"]),
                   dict(obj.get("constants", {})))


def infer_encodings(dataset, threshold=DISCRETE_THRESHOLD):
    """Choose an encoding per column from the training partition.

    Text columns and Number columns with at most ``threshold`` distinct values
    are discrete (base-10 digits of the category index); other Number columns
    are standardized. Constant columns carry no density and are dropped.
    """
    if not dataset.eligible:
        raise DatasetError(f"node {dataset.node} is ineligible: {dataset.reason}")
    train, _ = split_indices(dataset.row_count, dataset.seed)
    encs, constants = [], {}
    for col in dataset.columns:
        values = dataset.data[col.id][train]
        if col.data_type is DataType.TEXT:
            distinct = {str(v) for v in values}
        else:
            distinct = set(np.unique(values).tolist())
        if len(distinct) <= 1:
            warnings.warn(f"node {dataset.node}: constant column {col.id!r} dropped", DatasetWarning, stacklevel=2)
            if distinct:
                constants[col.id] = distinct.pop() if col.data_type is DataType.TEXT else float(distinct.pop())
            continue
        if col.data_type is DataType.TEXT or len(distinct) <= threshold:
            encs.append(_discrete(col.id, col.data_type, values))
        else:
            encs.append(ColumnEncoding(col.id, Mode.CONTINUOUS, col.data_type,
                                       float(values.mean()), float(values.std())))
    callers = dataset.condition_values[train]
    domain = dataset.condition_domain or sorted(set(callers.tolist()))
    cond = _discrete("caller", DataType.REFERENCE, callers, categories=[int(s) for s in domain])
    return EncodingSet(encs, cond, constants)


@dataclass
class SplitDataset:
    train: np.ndarray
    test: np.ndarray
    cond_train: np.ndarray
    cond_test: np.ndarray
    encodings: EncodingSet
    train_index: np.ndarray
    test_index: np.ndarray

    @property
    def encoded_dim(self):
        return self.encodings.dim

    @property
    def noise(self):
        """Per-dimension scale of one raw digit step in encoded units (0 for continuous)."""
        return self.encodings.digit_steps()


def encode(dataset, encodings):
    train_idx, test_idx = split_indices(dataset.row_count, dataset.seed)
    parts = []
    for idx in (train_idx, test_idx):
        data, callers = dataset.take(idx)
        parts.append(encodings.encode(data, callers))
    (xtr, ctr), (xte, cte) = parts
    return SplitDataset(xtr, xte, ctr, cte, encodings, train_idx, test_idx)


def decode(row, encodings):
    """Decode one encoded row (or a matrix) back to raw values."""
    table, flag = encodings.decode(np.atleast_2d(row))
    if np.ndim(row) == 1:
        return {k: v[0] for k, v in table.items()}, bool(flag[0])
    return table, flag


def dump_dataset(dataset, encodings, directory):
    """Write ``node_<symbol>.csv`` (raw rows, with split label) and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, _ = split_indices(dataset.row_count, dataset.seed)
    is_train = np.zeros(dataset.row_count, dtype=bool)
    is_train[train] = True
    ids = [c.id for c in dataset.columns]
    path = directory / f"node_{dataset.node}.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "caller", *ids])
        for i in range(dataset.row_count):
            w.writerow(["train" if is_train[i] else "test", int(dataset.condition_values[i]),
                        *(_fmt(dataset.data[c][i]) for c in ids)])
    sidecar = {
        "node": dataset.node,
        "rows": dataset.row_count,
        "columns": [{"id": c.id, "role": c.role.value, "source": c.source_symbol, "dataType": c.data_type.value}
                    for c in dataset.columns],
        "droppedColumns": dataset.dropped_columns,
        "encodings": encodings.to_json() if encodings is not None else None,
    }
    (directory / f"node_{dataset.node}.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

