"""Person-specific datasets: schema, CSV ingestion, discretization, CV folds."""
from __future__ import annotations

import csv
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ParseError, SchemaError

CATEGORICAL = "categorical"
NUMERIC = "numeric"


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str = CATEGORICAL
    # allowed values for categorical attributes; None means "whatever the data holds"
    domain: tuple | None = None

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise SchemaError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.domain is not None:
            object.__setattr__(self, "domain", tuple(self.domain))

    @property
    def numeric(self):
        return self.kind == NUMERIC


@dataclass(frozen=True)
class Schema:
    """Attribute metadata for a person-specific dataset.

    ``identifying`` defaults to every attribute except the sensitive one. The
    class attribute must be identifying; the sensitive attribute never is.
    """

    attributes: tuple[Attribute, ...]
    sensitive: str
    class_attr: str
    identifying: tuple[str, ...] | None = None

    def __post_init__(self):
        attrs = tuple(self.attributes)
        object.__setattr__(self, "attributes", attrs)
        names = [a.name for a in attrs]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        if self.sensitive not in names:
            raise SchemaError(f"sensitive attribute {self.sensitive!r} not in schema")
        if self.identifying is None:
            ident = tuple(n for n in names if n != self.sensitive)
        else:
            ident = tuple(self.identifying)
        object.__setattr__(self, "identifying", ident)
        unknown = set(ident) - set(names)
        if unknown:
            raise SchemaError(f"identifying attributes not in schema: {sorted(unknown)}")
        if self.sensitive in ident:
            raise SchemaError("the sensitive attribute cannot also be identifying")
        if self.class_attr == self.sensitive:
            raise SchemaError("the class attribute cannot be the sensitive attribute")
        if self.class_attr not in ident:
            raise SchemaError(f"class attribute {self.class_attr!r} must be identifying")
        if set(ident) | {self.sensitive} != set(names):
            raise SchemaError("every attribute must be identifying or sensitive")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"no attribute named {name!r}") from None

    def attribute(self, name: str) -> Attribute:
        return self.attributes[self.index(name)]

    def identifying_attributes(self) -> tuple[Attribute, ...]:
        return tuple(self.attribute(n) for n in self.identifying)

    def split(self, row: Sequence) -> tuple[tuple, object]:
        """Full row -> (identifying values in ``identifying`` order, sensitive value)."""
        ident = tuple(row[self.index(n)] for n in self.identifying)
        return ident, row[self.index(self.sensitive)]

    def join(self, ident: Sequence, sensitive) -> tuple:
        by_name = dict(zip(self.identifying, ident))
        by_name[self.sensitive] = sensitive
        return tuple(by_name[n] for n in self.names)

    def with_attribute(self, attr: Attribute) -> "Schema":
        attrs = tuple(attr if a.name == attr.name else a for a in self.attributes)
        return replace(self, attributes=attrs)


@dataclass(frozen=True)
class PersonDataset:
    schema: Schema
    rows: tuple[tuple, ...]
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        width = len(self.schema.attributes)
        for i, r in enumerate(rows):
            if len(r) != width:
                raise SchemaError(f"row {i} has {len(r)} values, schema has {width}")

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        j = self.schema.index(name)
        return [r[j] for r in self.rows]

    def subset(self, indices: Iterable[int]) -> "PersonDataset":
        return PersonDataset(self.schema, tuple(self.rows[i] for i in indices))

    def records(self) -> list[dict]:
        names = self.schema.names
        return [dict(zip(names, r)) for r in self.rows]


def _parse(value: str, attr: Attribute, rowno: int):
    if attr.numeric:
        try:
            x = float(value)
        except ValueError:
            raise ParseError(f"{attr.name}: cannot parse {value!r} as a number", rowno) from None
        if not math.isfinite(x):
            raise ParseError(f"{attr.name}: non-finite value {value!r}", rowno)
        return x
    if attr.domain is not None and value not in attr.domain:
        raise SchemaError(f"row {rowno}: {attr.name}={value!r} outside declared domain")
    return value


def load_csv(path: str | Path, schema: Schema, missing: str | None = "?") -> PersonDataset:
    """Read a CSV with a header row into a dataset.

    Rows with the ``missing`` marker in any schema attribute are dropped and
    counted in ``dataset.dropped``. Pass ``missing=None`` to treat the marker
    as an ordinary categorical value. Categorical attributes declared without
    a domain get the sorted set of observed values.
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: no header row") from None
        if sorted(header) != sorted(schema.names):
            raise SchemaError(
                f"{path}: header {header} does not match schema attributes {list(schema.names)}"
            )
        order = [header.index(n) for n in schema.names]
        rows, dropped = [], 0
        for rowno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", rowno)
            values = [rec[j].strip() for j in order]
            if missing is not None and missing in values:
                dropped += 1
                continue
            rows.append(tuple(_parse(v, a, rowno) for v, a in zip(values, schema.attributes)))

    attrs = []
    for j, a in enumerate(schema.attributes):
        if not a.numeric and a.domain is None:
            a = replace(a, domain=tuple(sorted({r[j] for r in rows})))
        attrs.append(a)
    schema = replace(schema, attributes=tuple(attrs))
    return PersonDataset(schema, tuple(rows), dropped=dropped)


def write_csv(ds: PersonDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(ds.schema.names)
        for r in ds.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _fmt(x: float) -> str:
    return f"{x:g}"


def bin_labels(lo: float, hi: float, bins: int) -> list[str]:
    if hi == lo:
        return [f"[{_fmt(lo)},{_fmt(hi)}]"]
    width = (hi - lo) / bins
    edges = [lo + i * width for i in range(bins)] + [hi]
    labels = [f"[{_fmt(edges[i])},{_fmt(edges[i + 1])})" for i in range(bins - 1)]
    labels.append(f"[{_fmt(edges[-2])},{_fmt(edges[-1])}]")
    return labels


def discretize(ds: PersonDataset, attr: str, bins: int) -> PersonDataset:
    """Equal-width binning of a numeric attribute over its observed range."""
    a = ds.schema.attribute(attr)
    if not a.numeric:
        raise TypeError(f"attribute {attr!r} is categorical")
    if bins < 2:
        raise ConfigError("bins must be at least 2")
    j = ds.schema.index(attr)
    values = [r[j] for r in ds.rows]
    lo, hi = (min(values), max(values)) if values else (0.0, 0.0)
    labels = bin_labels(lo, hi, bins)
    width = (hi - lo) / bins

    def label(v):
        if hi == lo:
            return labels[0]
        return labels[min(int((v - lo) / width), bins - 1)]

    rows = tuple(r[:j] + (label(r[j]),) + r[j + 1:] for r in ds.rows)
    schema = ds.schema.with_attribute(Attribute(attr, CATEGORICAL, tuple(labels)))
    return PersonDataset(schema, rows, dropped=ds.dropped)


def stratified_fold_indices(ds: PersonDataset, k: int, seed: int) -> list[list[int]]:
    """Test-fold row indices for stratified k-fold CV.

    Rows of each class are shuffled, the classes are concatenated in label
    order and dealt round-robin, so fold sizes and per-class counts differ
    by at most one between folds.
    """
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if k > len(ds):
        raise ConfigError(f"{k} folds requested for {len(ds)} rows")
    rng = random.Random(seed)
    by_class = defaultdict(list)
    for i, label in enumerate(ds.column(ds.schema.class_attr)):
        by_class[label].append(i)
    order = []
    for label in sorted(by_class):
        idx = by_class[label]
        rng.shuffle(idx)
        order.extend(idx)
    folds = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(i)
    return [sorted(f) for f in folds]


def stratified_folds(ds: PersonDataset, k: int, seed: int) -> list[tuple[PersonDataset, PersonDataset]]:
    out = []
    for test_idx in stratified_fold_indices(ds, k, seed):
        held = set(test_idx)
        train_idx = [i for i in range(len(ds)) if i not in held]
        out.append((ds.subset(train_idx), ds.subset(test_idx)))
    return out


def split_prune_indices(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0 < fraction < 1:
        raise ConfigError("prune fraction must be in (0, 1)")
    size = int(math.floor(fraction * n + 0.5))
    prune = set(random.Random(seed).sample(range(n), size))
    grow = [i for i in range(n) if i not in prune]
    return grow, sorted(prune)


def split_prune_set(train: PersonDataset, fraction: float, seed: int) -> tuple[PersonDataset, PersonDataset]:
    grow, prune = split_prune_indices(len(train), fraction, seed)
    return train.subset(grow), train.subset(prune)
