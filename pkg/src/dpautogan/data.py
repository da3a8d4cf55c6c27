"""Schema-driven tabular data: CSV ingestion, encoding into [0, 1]^n and back, splitting.

A raw :class:`Table` stores categorical columns as integer codes into the
schema's category list and continuous columns as floats. The encoded form is
a plain ``(m, n)`` float matrix whose column slices are given by
:meth:`Schema.offsets`.

Encoding rules:

* categorical with ``c`` categories -> ``c`` one-hot columns
* binary_label (exactly two categories) -> one 0/1 column, 1 meaning the second category
* continuous ``v`` in ``[lo, hi]`` -> ``(v - lo) / (hi - lo)``
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("categorical", "continuous", "binary_label")


class SchemaError(ValueError):
    """Malformed or inconsistent schema."""


class DataError(ValueError):
    """Input data that does not conform to its schema."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    categories: Tuple[str, ...] = ()
    min: float = 0.0
    max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))
        if self.kind == "continuous":
            if not (math.isfinite(self.min) and math.isfinite(self.max)) or not self.min < self.max:
                raise SchemaError(f"column {self.name!r}: need finite min < max")
        else:
            if not self.categories:
                raise SchemaError(f"column {self.name!r}: empty category list")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column {self.name!r}: duplicate categories")
            if self.kind == "binary_label" and len(self.categories) != 2:
                raise SchemaError(f"column {self.name!r}: binary_label needs exactly 2 categories")

    @property
    def is_continuous(self) -> bool:
        return self.kind == "continuous"

    @property
    def width(self) -> int:
        if self.kind == "categorical":
            return len(self.categories)
        return 1

    def to_dict(self) -> dict:
        if self.is_continuous:
            return {"name": self.name, "kind": self.kind, "min": self.min, "max": self.max}
        return {"name": self.name, "kind": self.kind, "categories": list(self.categories)}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        if "name" not in d or "kind" not in d:
            raise SchemaError("every column needs 'name' and 'kind'")
        if d["kind"] == "continuous":
            try:
                return cls(d["name"], "continuous", min=float(d["min"]), max=float(d["max"]))
            except KeyError as e:
                raise SchemaError(f"column {d['name']!r}: missing {e.args[0]!r}") from None
        return cls(d["name"], d["kind"], tuple(d.get("categories", ())))


@dataclass(frozen=True)
class Schema:
    columns: Tuple[ColumnSpec, ...]
    drop: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "drop", tuple(self.drop))
        names = [c.name for c in self.columns]
        if not names:
            raise SchemaError("schema has no columns")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        if set(names) & set(self.drop):
            raise SchemaError("a column cannot be both kept and dropped")

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    def __getitem__(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @cached_property
    def offsets(self) -> Tuple[Tuple[int, int], ...]:
        """``(start, stop)`` of every column's slice in the encoded matrix."""
        out, start = [], 0
        for c in self.columns:
            out.append((start, start + c.width))
            start += c.width
        return tuple(out)

    @property
    def width(self) -> int:
        return self.offsets[-1][1]

    def slice(self, name: str) -> slice:
        return slice(*self.offsets[self.index(name)])

    @property
    def diameter(self) -> float:
        """Largest Euclidean distance between two points of the encoded cube."""
        return math.sqrt(self.width)

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns], "drop": list(self.drop)}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        if not isinstance(d, dict) or "columns" not in d:
            raise SchemaError("schema document needs a 'columns' list")
        return cls(tuple(ColumnSpec.from_dict(c) for c in d["columns"]), tuple(d.get("drop", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise SchemaError(f"schema is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


@dataclass
class Table:
    """Raw typed rows: integer category codes or floats, one array per schema column."""

    schema: Schema
    columns: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(self.columns[n]) for n in self.schema.names}
        if len(lengths) > 1:
            raise DataError("columns have different lengths")
        for c in self.schema.columns:
            arr = self.columns[c.name]
            self.columns[c.name] = (np.asarray(arr, dtype=np.float64) if c.is_continuous
                                    else np.asarray(arr, dtype=np.int64))

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.schema.names[0]])

    def __len__(self) -> int:
        return self.n_rows

    def take(self, idx) -> "Table":
        idx = np.asarray(idx, dtype=np.int64)
        return Table(self.schema, {n: a[idx] for n, a in self.columns.items()})

    def labels(self, name: str) -> np.ndarray:
        """Column as strings (categorical) or floats (continuous)."""
        spec = self.schema[name]
        if spec.is_continuous:
            return self.columns[name].copy()
        return np.asarray(spec.categories, dtype=object)[self.columns[name]]

    def equals(self, other: "Table", atol: float = 0.0) -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for c in self.schema.columns:
            a, b = self.columns[c.name], other.columns[c.name]
            if c.is_continuous:
                if not np.allclose(a, b, rtol=0.0, atol=atol):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True

    @classmethod
    def from_rows(cls, schema: Schema, rows: Sequence[Sequence], first_row: int = 1) -> "Table":
        """Validate string/number rows given in schema column order."""
        cols: Dict[str, list] = {n: [] for n in schema.names}
        lookups = [None if c.is_continuous else {v: i for i, v in enumerate(c.categories)}
                   for c in schema.columns]
        for r, row in enumerate(rows, start=first_row):
            if len(row) != len(schema.columns):
                raise DataError(f"expected {len(schema.columns)} fields, got {len(row)}", row=r)
            for c, lookup, raw in zip(schema.columns, lookups, row):
                cols[c.name].append(_parse_value(c, lookup, raw, r))
        return cls(schema, {n: np.array(v) for n, v in cols.items()})


def _parse_value(c: ColumnSpec, lookup, raw, row: int):
    if isinstance(raw, str):
        raw = raw.strip()
    if c.is_continuous:
        try:
            v = float(raw)
        except (TypeError, ValueError):
            raise DataError(f"cannot parse {raw!r} as a number", row=row, column=c.name) from None
        if not math.isfinite(v):
            raise DataError("non-finite value", row=row, column=c.name)
        if not c.min <= v <= c.max:
            raise DataError(f"value {v} outside declared bounds [{c.min}, {c.max}]",
                            row=row, column=c.name)
        return v
    key = str(raw)
    if key == "":
        raise DataError("missing value", row=row, column=c.name)
    if key not in lookup:
        raise DataError(f"unknown category {key!r}", row=row, column=c.name)
    return lookup[key]


def load_csv(path, schema: Schema) -> Table:
    """Read a headered CSV. Columns named in ``schema.drop`` are ignored.

    Row numbers in errors count the header as row 1, so they match a text
    editor's line numbers for files without quoted newlines.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise DataError(f"header lacks schema columns {missing}", row=1)
        extra = [h for h in header if h not in schema.names and h not in schema.drop]
        if extra:
            raise DataError(f"header has columns not in the schema: {extra}", row=1)
        pick = [header.index(n) for n in schema.names]
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", row=r)
            rows.append([row[j] for j in pick])
    return Table.from_rows(schema, rows, first_row=2)


def _format(c: ColumnSpec, v) -> str:
    if c.is_continuous:
        return repr(float(v))
    return c.categories[int(v)]


def write_csv(table: Table, path) -> None:
    """Write a headered CSV in schema column order; floats use their shortest round-trip form."""
    cols = table.schema.columns
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in cols])
        arrays = [table.columns[c.name] for c in cols]
        for i in range(table.n_rows):
            w.writerow([_format(c, a[i]) for c, a in zip(cols, arrays)])


def preprocess(table: Table, schema: Optional[Schema] = None) -> np.ndarray:
    """Encode raw rows into an ``(m, n)`` matrix in ``[0, 1]``."""
    schema = schema or table.schema
    X = np.zeros((table.n_rows, schema.width))
    rows = np.arange(table.n_rows)
    for c, (lo, _) in zip(schema.columns, schema.offsets):
        v = table.columns[c.name]
        if c.kind == "categorical":
            X[rows, lo + v] = 1.0
        elif c.kind == "binary_label":
            X[:, lo] = (v == 1)
        else:
            X[:, lo] = (v - c.min) / (c.max - c.min)
    return X


def postprocess(matrix, schema: Schema) -> Table:
    """Decode any finite ``(m, n)`` matrix into raw rows.

    Categorical slices decode by argmax (ties to the lowest index), binary
    columns by ``u > 0.5``, continuous values are clamped to ``[0, 1]`` first.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != schema.width:
        raise DataError(f"matrix of shape {X.shape} does not match encoded width {schema.width}")
    if not np.all(np.isfinite(X)):
        raise DataError("matrix contains non-finite values")
    cols = {}
    for c, (lo, hi) in zip(schema.columns, schema.offsets):
        if c.kind == "categorical":
            cols[c.name] = np.argmax(X[:, lo:hi], axis=1)
        elif c.kind == "binary_label":
            cols[c.name] = (X[:, lo] > 0.5).astype(np.int64)
        else:
            cols[c.name] = c.min + np.clip(X[:, lo], 0.0, 1.0) * (c.max - c.min)
    return Table(schema, cols)


def split(table: Table, train_fraction: float, seed: int = 0,
          preserve_order: bool = False) -> Tuple[Table, Table]:
    """Disjoint train/test split of ``round(fraction * m)`` / remaining rows.

    With ``preserve_order`` the first rows of the file form the training set,
    for datasets that ship a canonical split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    m = table.n_rows
    n_train = int(round(train_fraction * m))
    order = np.arange(m) if preserve_order else np.random.default_rng(seed).permutation(m)
    return table.take(order[:n_train]), table.take(order[n_train:])


def infer_schema_unsafe(path, categorical: Optional[Sequence[str]] = None,
                        drop: Sequence[str] = ()) -> Schema:
    """Build a schema by scanning the data itself.

    The resulting bounds and category lists are functions of the private data,
    so using them in a private run leaks information. Convenience only.
    """
    log.warning("inferring schema from data: bounds and categories are not privacy-protected")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        data = [[v.strip() for v in row] for row in reader if row]
    forced = set(categorical or ())
    columns = []
    for j, name in enumerate(header):
        if name in drop:
            continue
        values = [row[j] for row in data]
        numeric = None
        if name not in forced:
            try:
                numeric = [float(v) for v in values]
            except ValueError:
                numeric = None
        if numeric is not None and numeric:
            lo, hi = min(numeric), max(numeric)
            if hi <= lo:
                hi = lo + 1.0
            columns.append(ColumnSpec(name, "continuous", min=lo, max=hi))
        else:
            columns.append(ColumnSpec(name, "categorical", tuple(sorted(set(values)))))
    return Schema(tuple(columns), tuple(drop))
