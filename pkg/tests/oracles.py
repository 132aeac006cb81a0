"""Reference computations written from the definitions, independent of the package code."""
from __future__ import annotations

import math
from collections import Counter
from itertools import product


def entropy(labels) -> float:
    n = len(labels)
    return -sum(c / n * math.log2(c / n) for c in Counter(labels).values()) if n else 0.0


def gain_ratio(rows, attr_index, class_index) -> float:
    """C4.5 gain ratio of a multiway split, straight from the textbook formulas."""
    n = len(rows)
    labels = [r[class_index] for r in rows]
    parts = {}
    for r in rows:
        parts.setdefault(r[attr_index], []).append(r[class_index])
    remainder = sum(len(p) / n * entropy(p) for p in parts.values())
    split_info = -sum(len(p) / n * math.log2(len(p) / n) for p in parts.values())
    gain = entropy(labels) - remainder
    return gain / split_info if split_info > 0 else 0.0


def l_diverse(groups: dict, l: int) -> bool:
    """Every group: no sensitive value takes more than a 1/l share."""
    for values in groups.values():
        for v in set(values):
            if values.count(v) / len(values) > 1 / l:
                return False
    return True


def quantile(values, p: float) -> float:
    """Linear interpolation between order statistics at position (n-1)p."""
    xs = sorted(values)
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def best_depth_tree_accuracy(rows, attr_indices, class_index, depth: int) -> int:
    """Most training rows any tree of at most ``depth`` multiway splits can classify correctly.

    Exhaustive search; only meant for tiny fixtures.
    """
    def majority_hits(sub):
        return max(Counter(r[class_index] for r in sub).values()) if sub else 0

    def search(sub, d):
        best = majority_hits(sub)
        if d == 0 or not sub:
            return best
        for a in attr_indices:
            parts = {}
            for r in sub:
                parts.setdefault(r[a], []).append(r)
            if len(parts) < 2:
                continue
            best = max(best, sum(search(p, d - 1) for p in parts.values()))
        return best

    return search(list(rows), depth)


def xor_rows(multiplicity=(3, 1, 2, 2)):
    """Two binary attributes and class = x XOR y, cells repeated by ``multiplicity``."""
    rows = []
    for (x, y), m in zip(product("01", repeat=2), multiplicity):
        rows += [(x, y, "p" if x != y else "n")] * m
    return rows
