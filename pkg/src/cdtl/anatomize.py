"""Anatomization into an identifier table (IT) and a sensitive table (ST).

IT rows keep the identifying values, the group id and an encrypted sequence
number; ST rows hold (seq, gid, sensitive value). Only the gid links the two
tables in plaintext. The client, who holds the key, rejoins rows exactly by
decrypting ESEQ and matching it against SEQ.
"""
from __future__ import annotations

import base64
import csv
import heapq
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .crypto import ClientKey, decrypt_seq, encrypt_seq, new_salt
from .dataset import PersonDataset, Schema
from .errors import AnatomyError, AuthenticationError, EligibilityError, IntegrityError, WrongKeyError

GID = "GID"
ESEQ = "ESEQ"
SEQ = "SEQ"


@dataclass(frozen=True)
class ITRow:
    values: tuple
    gid: int
    eseq: bytes


@dataclass(frozen=True)
class STRow:
    seq: int
    gid: int
    value: object


def _most_common(values: Sequence):
    counts = Counter(values)
    # deterministic pick among ties for error reporting
    return max(sorted(counts, key=str), key=counts.__getitem__), counts


def check_eligibility(ds: PersonDataset, l: int) -> bool:
    """True iff no sensitive value holds more than a 1/l share of the rows."""
    if l < 1:
        raise ValueError("l must be at least 1")
    if not len(ds):
        return True
    value, counts = _most_common(ds.column(ds.schema.sensitive))
    return counts[value] * l <= len(ds)


def suppress_to_eligible(ds: PersonDataset, l: int, seed: int) -> tuple[PersonDataset, int]:
    """Drop the fewest rows of over-represented sensitive values so ``ds`` becomes l-eligible.

    Rows are removed at random (seeded) from whichever value currently exceeds
    the 1/l cap. Returns the reduced dataset and the number of rows removed.
    """
    rng = random.Random(seed)
    j = ds.schema.index(ds.schema.sensitive)
    by_value = defaultdict(list)
    for i, r in enumerate(ds.rows):
        by_value[r[j]].append(i)
    for idx in by_value.values():
        rng.shuffle(idx)
    n = len(ds.rows)
    removed = set()
    while True:
        value = max(sorted(by_value, key=str), key=lambda v: len(by_value[v]))
        if len(by_value[value]) * l <= n:
            break
        removed.add(by_value[value].pop())
        n -= 1
    keep = [i for i in range(len(ds.rows)) if i not in removed]
    return ds.subset(keep), len(removed)


def _form_groups(sensitive: Sequence, l: int, rng: random.Random) -> list[list[int]]:
    """Randomized most-frequent-first bucketization into l-diverse groups."""
    order = list(range(len(sensitive)))
    rng.shuffle(order)
    buckets: dict = {}
    first_seen: dict = {}
    for pos, i in enumerate(order):
        v = sensitive[i]
        buckets.setdefault(v, []).append(i)
        first_seen.setdefault(v, pos)

    # heap of (-remaining, first position in shuffled order); values themselves
    # may not be mutually comparable, so they are looked up by rank
    value_at = {first_seen[v]: v for v in buckets}
    heap = [(-len(buckets[v]), first_seen[v]) for v in buckets]
    heapq.heapify(heap)

    groups: list[list[int]] = []
    while len(heap) >= l:
        drawn = [heapq.heappop(heap) for _ in range(l)]
        group = []
        for negcount, rank in drawn:
            group.append(buckets[value_at[rank]].pop())
            if negcount + 1 < 0:
                heapq.heappush(heap, (negcount + 1, rank))
        groups.append(group)

    residual = [i for _, rank in heap for i in buckets[value_at[rank]]]
    for i in residual:
        v = sensitive[i]
        fits = [
            g for g in groups
            if (sum(1 for j in g if sensitive[j] == v) + 1) * l <= len(g) + 1
        ]
        if not fits:
            raise AnatomyError(f"cannot place residual row with sensitive value {v!r}", value=v)
        rng.choice(fits).append(i)
    return groups


def anatomize(ds: PersonDataset, l: int, key: ClientKey, seed: int) -> tuple[list[ITRow], list[STRow]]:
    """Split ``ds`` into l-diverse IT and ST tables.

    IT rows come out in dataset order (IT row i belongs to dataset row i); ST
    rows are sorted by seq, which is a seeded random permutation of 1..n.
    """
    schema = ds.schema
    sens = ds.column(schema.sensitive)
    if not check_eligibility(ds, l):
        value, counts = _most_common(sens)
        raise EligibilityError(value, counts[value], len(ds), l)
    rng = random.Random(seed)
    groups = _form_groups(sens, l, rng)

    n = len(ds)
    seqs = list(range(1, n + 1))
    rng.shuffle(seqs)
    gid_of = [0] * n
    for g, members in enumerate(groups, start=1):
        for i in members:
            gid_of[i] = g

    it, st = [], []
    for i, row in enumerate(ds.rows):
        ident, value = schema.split(row)
        eseq = encrypt_seq(key, new_salt(), seqs[i]).to_bytes()
        it.append(ITRow(ident, gid_of[i], eseq))
        st.append(STRow(seqs[i], gid_of[i], value))
    st.sort(key=lambda r: r.seq)
    return it, st


def group_members(st: Sequence[STRow]) -> dict[int, list]:
    out = defaultdict(list)
    for r in st:
        out[r.gid].append(r.value)
    return out


def verify_l_diverse(it: Sequence[ITRow], st: Sequence[STRow], l: int) -> bool:
    """Check the frequency cap in every group and that IT/ST group sizes agree."""
    st_groups = group_members(st)
    it_sizes = Counter(r.gid for r in it)
    if set(it_sizes) != set(st_groups):
        return False
    for gid, values in st_groups.items():
        if it_sizes[gid] != len(values):
            return False
        if max(Counter(values).values()) * l > len(values):
            return False
    return True


def consistent_assignments(it_group: Sequence[ITRow], st_group: Sequence[STRow]) -> int:
    """Number of row->value bijections consistent with a group's public data.

    With only the gid to go on, any permutation of the group's ST rows over its
    IT rows is consistent, i.e. |G|! of them.
    """
    from math import factorial

    if len(it_group) != len(st_group) or {r.gid for r in it_group} != {r.gid for r in st_group}:
        return 0
    return factorial(len(it_group))


def rejoin(it_rows: Sequence[ITRow], st_rows: Sequence[STRow], key: ClientKey) -> list[tuple[tuple, object]]:
    """(identifying values, sensitive value) for each IT row, in IT order."""
    by_seq = {r.seq: r for r in st_rows}
    out = []
    for row in it_rows:
        try:
            seq = decrypt_seq(key, row.eseq)
        except AuthenticationError as e:
            raise WrongKeyError(f"cannot decrypt ESEQ of a row in group {row.gid}: {e}") from None
        match = by_seq.get(seq)
        if match is None or match.gid != row.gid:
            raise IntegrityError(f"no sensitive row matches a row of group {row.gid}", gid=row.gid)
        out.append((row.values, match.value))
    return out


def reconstruct(it: Sequence[ITRow], st: Sequence[STRow], key: ClientKey, schema: Schema) -> PersonDataset:
    rows = tuple(schema.join(ident, value) for ident, value in rejoin(it, st, key))
    return PersonDataset(schema, rows)


# CSV exchange format -------------------------------------------------------

def _cell(v):
    return repr(v) if isinstance(v, float) else v


def write_tables(it: Sequence[ITRow], st: Sequence[STRow], schema: Schema,
                 it_path: str | Path, st_path: str | Path) -> None:
    with open(it_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(list(schema.identifying) + [GID, ESEQ])
        for r in it:
            w.writerow([_cell(v) for v in r.values] + [r.gid, base64.b64encode(r.eseq).decode()])
    with open(st_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([SEQ, GID, schema.sensitive])
        for r in st:
            w.writerow([r.seq, r.gid, _cell(r.value)])


def read_tables(it_path: str | Path, st_path: str | Path,
                numeric: Sequence[str] = ()) -> tuple[list[str], str, list[ITRow], list[STRow]]:
    """Load IT/ST CSVs. Returns (identifying names, sensitive name, IT, ST)."""
    numeric = set(numeric)

    def conv(name, v):
        return float(v) if name in numeric else v

    with open(it_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[-2:] != [GID, ESEQ]:
            raise AnatomyError(f"{it_path}: IT header must end with {GID},{ESEQ}")
        ident = header[:-2]
        it = [
            ITRow(tuple(conv(n, v) for n, v in zip(ident, rec[:-2])), int(rec[-2]),
                  base64.b64decode(rec[-1]))
            for rec in reader if rec
        ]
    with open(st_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != [SEQ, GID] or len(header) != 3:
            raise AnatomyError(f"{st_path}: ST header must be {SEQ},{GID},<sensitive>")
        sensitive = header[2]
        st = [STRow(int(rec[0]), int(rec[1]), conv(sensitive, rec[2])) for rec in reader if rec]
    return ident, sensitive, it, st
