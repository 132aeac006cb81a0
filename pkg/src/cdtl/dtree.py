"""C4.5-style decision trees: gain-ratio induction, reduced-error pruning,
routing, and a canonical byte format.

One tree type serves the server's base tree, the client's leaf subtrees and
the client-naive tree. Rows are tuples aligned with ``tree.columns``; routing
also accepts a mapping from attribute name to value, in which case absent
attributes count as missing.
"""
from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

from .dataset import Attribute
from .errors import EmptyInputError, FormatError

MULTIWAY = "multiway"
BINARY = "binary"
NUMERIC = "numeric"
_KIND_CODES = {MULTIWAY: 0, BINARY: 1, NUMERIC: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

FORMAT_VERSION = 1
_EPS = 1e-12


@dataclass(frozen=True)
class LearnParams:
    min_leaf: int = 2
    binary: bool = False
    # keep splitting (zero-gain splits allowed, never pruned) while a node holds more rows
    max_leaf_size: int | None = None

    def __post_init__(self):
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if self.max_leaf_size is not None and self.max_leaf_size < 1:
            raise ValueError("max_leaf_size must be positive")


@dataclass(frozen=True)
class SplitTest:
    attr: str
    index: int
    kind: str
    # MULTIWAY: tuple of child values; BINARY: the "equals" value; NUMERIC: threshold
    operand: object

    def branch(self, value) -> int | None:
        """Child index for ``value``; None when the value is missing or unseen."""
        if value is None:
            return None
        if self.kind == NUMERIC:
            return 0 if value <= self.operand else 1
        if self.kind == BINARY:
            return 0 if value == self.operand else 1
        try:
            return self.operand.index(value)
        except ValueError:
            return None

    def describe(self, child: int) -> str:
        if self.kind == NUMERIC:
            return f"{self.attr} {'<=' if child == 0 else '>'} {self.operand:g}"
        if self.kind == BINARY:
            return f"{self.attr} {'=' if child == 0 else '!='} {self.operand}"
        return f"{self.attr} = {self.operand[child]}"


@dataclass(eq=False)
class Leaf:
    counts: dict
    members: tuple = ()
    refined_ptr: str | None = None
    # distribution of the parent, used when this leaf received no rows
    fallback: dict | None = None

    @property
    def size(self) -> int:
        return sum(self.counts.values())


@dataclass(eq=False)
class Internal:
    test: SplitTest
    children: list
    counts: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(self.counts.values())


@dataclass(eq=False)
class DecisionTree:
    root: Leaf | Internal
    columns: tuple[str, ...]
    class_attr: str

    def leaves(self) -> list[tuple[str, Leaf]]:
        return list(_iter_leaves(self.root, ()))

    def leaf(self, leaf_id: str) -> Leaf:
        node = self.root
        for step in _parse_leaf_id(leaf_id):
            if not isinstance(node, Internal) or step >= len(node.children):
                raise KeyError(leaf_id)
            node = node.children[step]
        if not isinstance(node, Leaf):
            raise KeyError(leaf_id)
        return node

    def node_count(self) -> int:
        return sum(1 for _ in _iter_nodes(self.root))

    def depth(self) -> int:
        return max(len(_parse_leaf_id(i)) for i, _ in self.leaves())

    def render(self) -> str:
        lines = []

        def walk(node, indent):
            if isinstance(node, Leaf):
                return
            for i, child in enumerate(node.children):
                text = "  " * indent + node.test.describe(i)
                if isinstance(child, Leaf):
                    text += f": {majority_label(child)} {dict(sorted(child.counts.items(), key=_label_key))}"
                lines.append(text)
                walk(child, indent + 1)

        if isinstance(self.root, Leaf):
            return f"{majority_label(self.root)} {self.root.counts}"
        walk(self.root, 0)
        return "\n".join(lines)


def leaf_id_for(path: Sequence[int]) -> str:
    return "/" + "/".join(str(i) for i in path)


def _parse_leaf_id(leaf_id: str) -> list[int]:
    if not leaf_id.startswith("/"):
        raise KeyError(leaf_id)
    body = leaf_id[1:]
    try:
        return [int(p) for p in body.split("/")] if body else []
    except ValueError:
        raise KeyError(leaf_id) from None


def _iter_leaves(node, path) -> Iterator[tuple[str, Leaf]]:
    if isinstance(node, Leaf):
        yield leaf_id_for(path), node
    else:
        for i, child in enumerate(node.children):
            yield from _iter_leaves(child, path + (i,))


def _iter_nodes(node):
    yield node
    if isinstance(node, Internal):
        for child in node.children:
            yield from _iter_nodes(child)


# --------------------------------------------------------------------------
# induction

def _entropy(counts) -> float:
    n = sum(counts)
    if n == 0:
        return 0.0
    h = 0.0
    for c in counts:
        if c:
            p = c / n
            h -= p * math.log2(p)
    return h


def _split_scores(parent: Counter, branches: list[Counter], n: int):
    """(information gain, split information) for a partition of n rows."""
    h_children = 0.0
    split_info = 0.0
    for b in branches:
        m = sum(b.values())
        if m:
            h_children += m / n * _entropy(b.values())
            split_info -= m / n * math.log2(m / n)
    return _entropy(parent.values()) - h_children, split_info


@dataclass
class _Candidate:
    test: SplitTest
    parts: list  # row index lists, one per child
    gain: float
    split_info: float

    @property
    def ratio(self) -> float:
        return self.gain / self.split_info if self.split_info > _EPS else 0.0


class _Learner:
    def __init__(self, rows, columns, class_attr, allowed, params, refs):
        self.rows = rows
        self.columns = columns
        self.names = [c.name for c in columns]
        self.y = self.names.index(class_attr)
        self.allowed = [j for j, c in enumerate(columns) if c.name in allowed]
        self.params = params
        self.refs = refs

    def counts(self, idx) -> Counter:
        y = self.y
        rows = self.rows
        return Counter(rows[i][y] for i in idx)

    def admissible(self, sizes) -> bool:
        return sum(1 for s in sizes if s >= self.params.min_leaf) >= 2

    def candidates(self, idx, parent: Counter) -> list[_Candidate]:
        out = []
        n = len(idx)
        for j in self.allowed:
            attr = self.columns[j]
            if attr.numeric:
                cand = self._numeric(j, idx, parent, n)
            elif self.params.binary:
                cand = self._binary(j, idx, parent, n)
            else:
                cand = self._multiway(j, idx, parent, n)
            if cand is not None:
                out.append(cand)
        return out

    def _multiway(self, j, idx, parent, n):
        rows, y = self.rows, self.y
        parts: dict = {}
        for i in idx:
            parts.setdefault(rows[i][j], []).append(i)
        domain = self.columns[j].domain
        if domain is None:
            domain = tuple(sorted(parts, key=_label_key))
        else:
            extra = sorted((v for v in parts if v not in domain), key=_label_key)
            domain = tuple(domain) + tuple(extra)
        lists = [parts.get(v, []) for v in domain]
        if not self.admissible([len(p) for p in lists]):
            return None
        branches = [Counter(rows[i][y] for i in p) for p in lists]
        gain, si = _split_scores(parent, branches, n)
        return _Candidate(SplitTest(self.names[j], j, MULTIWAY, domain), lists, gain, si)

    def _binary(self, j, idx, parent, n):
        rows, y = self.rows, self.y
        by_value: dict = {}
        for i in idx:
            by_value.setdefault(rows[i][j], Counter())[rows[i][y]] += 1
        best = None
        for v in sorted(by_value, key=_label_key):
            eq = by_value[v]
            m = sum(eq.values())
            if not self.admissible([m, n - m]):
                continue
            gain, si = _split_scores(parent, [eq, parent - eq], n)
            if best is None or gain > best[0] + _EPS:
                best = (gain, si, v)
        if best is None:
            return None
        gain, si, v = best
        eq_idx = [i for i in idx if rows[i][j] == v]
        ne_idx = [i for i in idx if rows[i][j] != v]
        return _Candidate(SplitTest(self.names[j], j, BINARY, v), [eq_idx, ne_idx], gain, si)

    def _numeric(self, j, idx, parent, n):
        rows, y = self.rows, self.y
        order = sorted(idx, key=lambda i: rows[i][j])
        left = Counter()
        right = Counter(parent)
        labels = list(parent)
        h_parent = _entropy(parent.values())
        best = None
        min_leaf = self.params.min_leaf
        for pos in range(n - 1):
            label = rows[order[pos]][y]
            left[label] += 1
            right[label] -= 1
            a, b = rows[order[pos]][j], rows[order[pos + 1]][j]
            if a == b:
                continue
            m = pos + 1
            if m < min_leaf or n - m < min_leaf:
                continue
            h = (m / n) * _entropy([left[c] for c in labels]) + ((n - m) / n) * _entropy(
                [right[c] for c in labels])
            gain = h_parent - h
            if best is None or gain > best[0] + _EPS:
                best = (gain, m, (a + b) / 2)
        if best is None:
            return None
        gain, m, threshold = best
        si = -(m / n) * math.log2(m / n) - ((n - m) / n) * math.log2((n - m) / n)
        lo = [i for i in idx if rows[i][j] <= threshold]
        hi = [i for i in idx if rows[i][j] > threshold]
        return _Candidate(SplitTest(self.names[j], j, NUMERIC, threshold), [lo, hi], gain, si)

    def choose(self, cands: list[_Candidate], relaxed: bool) -> _Candidate | None:
        useful = [c for c in cands if c.gain > _EPS and c.split_info > _EPS]
        if useful:
            # C4.5: gain ratio among splits with at least average gain
            avg = sum(c.gain for c in useful) / len(useful)
            pool = [c for c in useful if c.gain >= avg - 1e-3]
        elif relaxed:
            pool = [c for c in cands if c.split_info > _EPS]
        else:
            return None
        best = None
        for c in pool:
            if best is None or c.ratio > best.ratio + _EPS:
                best = c
        return best

    def build(self, idx):
        counts = self.counts(idx)
        leaf = Leaf(dict(counts), tuple(self.refs[i] for i in idx))
        if len(counts) <= 1 or len(idx) < self.params.min_leaf:
            return leaf
        cap = self.params.max_leaf_size
        relaxed = cap is not None and len(idx) > cap
        best = self.choose(self.candidates(idx, counts), relaxed)
        if best is None:
            return leaf
        children = []
        for part in best.parts:
            if part:
                children.append(self.build(part))
            else:
                children.append(Leaf({}, (), fallback=dict(counts)))
        return Internal(best.test, children, dict(counts))


def learn(rows: Sequence[Sequence], columns: Sequence[Attribute], class_attr: str,
          allowed_attrs, params: LearnParams = LearnParams(),
          refs: Sequence | None = None) -> DecisionTree:
    """Grow a tree top-down by gain ratio.

    ``allowed_attrs`` names the attributes that may be tested; anything else
    in ``columns`` (GID, ESEQ, the sensitive value on the server) is never
    read. ``refs`` are the member references stored in the leaves, defaulting
    to row positions.
    """
    if not rows:
        raise EmptyInputError("cannot learn a tree from zero rows")
    columns = tuple(columns)
    names = [c.name for c in columns]
    if class_attr not in names:
        raise ValueError(f"class attribute {class_attr!r} not among columns")
    allowed = set(allowed_attrs)
    if class_attr in allowed:
        raise ValueError("the class attribute cannot be used for splitting")
    unknown = allowed - set(names)
    if unknown:
        raise ValueError(f"allowed attributes not among columns: {sorted(unknown)}")
    refs = tuple(range(len(rows))) if refs is None else tuple(refs)
    learner = _Learner(rows, columns, class_attr, allowed, params, refs)
    root = learner.build(list(range(len(rows))))
    return DecisionTree(root, tuple(names), class_attr)


# --------------------------------------------------------------------------
# inference

def _label_key(v):
    return (type(v).__name__, v)


def majority_label(node: Leaf | Mapping):
    """Most frequent class; ties go to the smallest label.

    A leaf that received no training rows answers with its parent's majority.
    """
    counts = node if isinstance(node, Mapping) else node.counts
    if not counts and isinstance(node, Leaf) and node.fallback:
        counts = node.fallback
    if not counts:
        raise EmptyInputError("no class distribution to take a majority from")
    top = max(counts.values())
    return min((label for label, c in counts.items() if c == top), key=_label_key)


def _value(row, test: SplitTest):
    if isinstance(row, Mapping):
        return row.get(test.attr)
    return row[test.index]


def _heaviest(children) -> int:
    sizes = [c.size for c in children]
    return sizes.index(max(sizes))


def route(tree: DecisionTree, row) -> tuple[str, Leaf]:
    """Leaf id and leaf reached by ``row``. Missing values follow the heaviest child."""
    node = tree.root
    path = []
    while isinstance(node, Internal):
        b = node.test.branch(_value(row, node.test))
        if b is None:
            b = _heaviest(node.children)
        path.append(b)
        node = node.children[b]
    return leaf_id_for(path), node


def find_leaf(tree: DecisionTree, row) -> Leaf:
    return route(tree, row)[1]


def predict(tree: DecisionTree, row):
    return majority_label(find_leaf(tree, row))


def accuracy(tree: DecisionTree, rows: Sequence[Sequence], class_index: int) -> float:
    if not rows:
        return 0.0
    return sum(1 for r in rows if predict(tree, r) == r[class_index]) / len(rows)


# --------------------------------------------------------------------------
# reduced-error pruning

def _collect_members(node) -> tuple:
    if isinstance(node, Leaf):
        return node.members
    out = ()
    for child in node.children:
        out += _collect_members(child)
    return out


def prune_reduced_error(tree: DecisionTree, prune_rows: Sequence[Sequence],
                        params: LearnParams = LearnParams()) -> DecisionTree:
    """Bottom-up (post-order, children left to right) reduced-error pruning.

    A subtree becomes a leaf carrying its node's training distribution whenever
    that does not increase the number of misclassified prune rows. A subtree
    that no prune row reaches therefore collapses. Nodes above
    ``params.max_leaf_size`` are kept.
    """
    y = tree.columns.index(tree.class_attr)
    cap = params.max_leaf_size

    def errors(label, rows):
        return sum(1 for r in rows if r[y] != label)

    def walk(node, rows):
        if isinstance(node, Leaf):
            return Leaf(dict(node.counts), node.members, node.refined_ptr,
                        dict(node.fallback) if node.fallback else None), errors(majority_label(node), rows)
        parts = [[] for _ in node.children]
        for r in rows:
            b = node.test.branch(_value(r, node.test))
            parts[_heaviest(node.children) if b is None else b].append(r)
        children, sub_err = [], 0
        for child, part in zip(node.children, parts):
            c, e = walk(child, part)
            children.append(c)
            sub_err += e
        leaf_err = errors(majority_label(node.counts), rows)
        if leaf_err <= sub_err and (cap is None or node.size <= cap):
            return Leaf(dict(node.counts), _collect_members(node)), leaf_err
        for c in children:
            if isinstance(c, Leaf) and not c.counts:
                c.fallback = dict(node.counts)
        return Internal(node.test, children, dict(node.counts)), sub_err

    root, _ = walk(tree.root, list(prune_rows))
    return DecisionTree(root, tree.columns, tree.class_attr)


# --------------------------------------------------------------------------
# serialization: u32 big-endian integers, length-prefixed UTF-8 strings

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(_U8.pack(v))

    def u32(self, v):
        self.parts.append(_U32.pack(v))

    def f64(self, v):
        self.parts.append(_F64.pack(v))

    def raw(self, b: bytes):
        self.u32(len(b))
        self.parts.append(bytes(b))

    def str(self, s: str):
        self.raw(s.encode("utf-8"))

    def value(self, v):
        if isinstance(v, str):
            self.u8(0)
            self.str(v)
        elif isinstance(v, bool) or v is None:
            raise FormatError(f"cannot encode value {v!r}")
        elif isinstance(v, float):
            self.u8(1)
            self.f64(v)
        elif isinstance(v, int):
            self.u8(2)
            self.parts.append(_I64.pack(v))
        else:
            raise FormatError(f"cannot encode value of type {type(v).__name__}")

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def _take(self, s: struct.Struct):
        try:
            (v,) = s.unpack_from(self.data, self.pos)
        except struct.error:
            raise FormatError(f"truncated input at byte {self.pos}") from None
        self.pos += s.size
        return v

    def u8(self):
        try:
            v = self.data[self.pos]
        except IndexError:
            raise FormatError(f"truncated input at byte {self.pos}") from None
        self.pos += 1
        return v

    def u32(self):
        return self._take(_U32)

    def f64(self):
        return self._take(_F64)

    def raw(self) -> bytes:
        n = self._take(_U32)
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(f"length {n} at byte {self.pos} overruns input")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def str(self) -> str:
        try:
            return self.raw().decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("invalid UTF-8 string") from None

    def value(self):
        tag = self.u8()
        if tag == 0:
            return self.str()
        if tag == 1:
            return self._take(_F64)
        if tag == 2:
            return self._take(_I64)
        raise FormatError(f"unknown value tag {tag}")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def _write_counts(w: Writer, counts: Mapping):
    w.u32(len(counts))
    for label in sorted(counts, key=_label_key):
        w.value(label)
        w.u32(counts[label])


def serialize(tree: DecisionTree) -> bytes:
    """Canonical bytes for a tree. Leaf members and server pointers are not included."""
    w = Writer()
    w.u8(FORMAT_VERSION)
    w.str(tree.class_attr)
    w.u32(len(tree.columns))
    for c in tree.columns:
        w.str(c)
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, Leaf):
            w.u8(0)
            _write_counts(w, node.counts)
            continue
        t = node.test
        w.u8(1)
        w.u32(t.index)
        w.u8(_KIND_CODES[t.kind])
        if t.kind == MULTIWAY:
            w.u32(len(t.operand))
            for v in t.operand:
                w.value(v)
        elif t.kind == BINARY:
            w.value(t.operand)
        else:
            w.f64(t.operand)
        w.u32(len(node.children))
        stack.extend(reversed(node.children))
    return w.getvalue()


def deserialize(data: bytes) -> DecisionTree:
    r = Reader(data)
    version = r.u8()
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown tree format version {version}")
    class_attr = r.str()
    columns = tuple(r.str() for _ in range(r.u32()))
    if class_attr not in columns:
        raise FormatError("class attribute missing from column list")

    def node():
        tag = r.u8()
        if tag == 0:
            counts = {}
            for _ in range(r.u32()):
                label = r.value()
                counts[label] = r.u32()
            return Leaf(counts)
        if tag != 1:
            raise FormatError(f"unknown node tag {tag}")
        index = r.u32()
        if index >= len(columns):
            raise FormatError(f"attribute index {index} out of range")
        kind = _KIND_NAMES.get(r.u8())
        if kind is None:
            raise FormatError("unknown split kind")
        if kind == MULTIWAY:
            operand = tuple(r.value() for _ in range(r.u32()))
        elif kind == BINARY:
            operand = r.value()
        else:
            operand = r.f64()
            if not math.isfinite(operand):
                raise FormatError("non-finite threshold")
        n_children = r.u32()
        expected = len(operand) if kind == MULTIWAY else 2
        if n_children != expected:
            raise FormatError(f"{kind} split with {n_children} children")
        children = [node() for _ in range(n_children)]
        parent: dict = {}
        for c in children:
            for label, k in c.counts.items():
                parent[label] = parent.get(label, 0) + k
        for c in children:
            if isinstance(c, Leaf) and not c.counts:
                c.fallback = parent
        return Internal(SplitTest(columns[index], index, kind, operand), children, parent)

    try:
        root = node()
    except RecursionError:
        raise FormatError("tree nesting too deep") from None
    r.done()
    return DecisionTree(root, columns, class_attr)
