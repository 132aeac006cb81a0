"""The outsourced database server (CDBS).

It holds IT and ST, learns the base tree from identifying attributes only,
answers prediction requests with either a stored encrypted subtree or the
group-level join of a leaf, and serves the two baselines. Every frame in
and out is appended to ``transcript``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import protocol as p
from .anatomize import ESEQ, GID, ITRow, STRow
from .dataset import CATEGORICAL, NUMERIC, Attribute, Schema, split_prune_indices
from .dtree import DecisionTree, LearnParams, learn, majority_label, prune_reduced_error, route
from .errors import EmptyInputError, ProtocolError


@dataclass
class TranscriptRecord:
    ts: float
    direction: str
    msg_type: str
    leaf_id: str | None
    nbytes: int
    frame: bytes = field(repr=False)

    def to_json(self) -> dict:
        return {
            "ts": self.ts,
            "dir": self.direction,
            "msg_type": self.msg_type,
            "leaf_id": self.leaf_id,
            "bytes": self.nbytes,
            "frame": base64.b64encode(self.frame).decode(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TranscriptRecord":
        return cls(d["ts"], d["dir"], d["msg_type"], d["leaf_id"], d["bytes"],
                   base64.b64decode(d["frame"]))


def write_transcript(records: Sequence[TranscriptRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json()) + "\n")


def read_transcript(path: str | Path) -> list[TranscriptRecord]:
    with open(path, encoding="utf-8") as f:
        return [TranscriptRecord.from_json(json.loads(line)) for line in f if line.strip()]


class Server:
    def __init__(self, it: Sequence[ITRow], st: Sequence[STRow], schema: Schema, *,
                 params: LearnParams = LearnParams(), prune_fraction: float = 0.2,
                 prune_seed: int = 0):
        self.it = list(it)
        self.st = list(st)
        self.schema = schema
        self.params = params
        self.grow_idx, self.prune_idx = split_prune_indices(len(self.it), prune_fraction, prune_seed) \
            if self.it else ([], [])
        self.base_tree: DecisionTree | None = None
        self.subtree_store: dict[str, bytes] = {}
        self.encr_tree: bytes | None = None
        self.transcript: list[TranscriptRecord] = []
        self._leaves: dict = {}
        self._prune_members: dict[str, tuple[int, ...]] = {}
        self._st_by_gid: dict = defaultdict(list)
        for r in self.st:
            self._st_by_gid[r.gid].append(r)
        self._lock = threading.Lock()

    # -- base tree ---------------------------------------------------------

    def it_columns(self) -> tuple[Attribute, ...]:
        return self.schema.identifying_attributes() + (
            Attribute(GID, NUMERIC), Attribute(ESEQ, CATEGORICAL))

    def _it_tuple(self, row: ITRow) -> tuple:
        return row.values + (row.gid, row.eseq)

    def train_base(self) -> int:
        """Learn and prune the base tree; returns the number of leaves."""
        if not self.it:
            raise EmptyInputError("identifier table is empty")
        if not self.grow_idx:
            raise EmptyInputError("no growing rows left after the pruning split")
        rows = [self._it_tuple(r) for r in self.it]
        allowed = [n for n in self.schema.identifying if n != self.schema.class_attr]
        tree = learn([rows[i] for i in self.grow_idx], self.it_columns(), self.schema.class_attr,
                     allowed, self.params, refs=self.grow_idx)
        tree = prune_reduced_error(tree, [rows[i] for i in self.prune_idx], self.params)
        self.base_tree = tree
        self._leaves = dict(tree.leaves())
        prune_members = defaultdict(list)
        for i in self.prune_idx:
            leaf_id, _ = route(tree, rows[i])
            prune_members[leaf_id].append(i)
        self._prune_members = {k: tuple(v) for k, v in prune_members.items()}
        self.subtree_store.clear()
        return len(self._leaves)

    def biggest_leaf(self) -> int:
        """Growing rows in the largest base-tree leaf."""
        self._require_tree()
        return max(len(leaf.members) for leaf in self._leaves.values())

    def _require_tree(self):
        if self.base_tree is None:
            raise ProtocolError("base tree has not been trained")

    def _check_instance(self, instance: Mapping):
        if self.schema.sensitive in instance:
            raise ProtocolError("prediction requests must not carry the sensitive attribute")

    # -- collaborative learning ------------------------------------------------

    def find_bdt_leaf(self, instance: Mapping) -> p.RespEncrSubtree | p.RespLeafInstances:
        self._require_tree()
        self._check_instance(instance)
        leaf_id, leaf = route(self.base_tree, instance)
        if leaf.refined_ptr is not None:
            return p.RespEncrSubtree(leaf_id, self.subtree_store[leaf.refined_ptr])
        return p.RespLeafInstances(leaf_id, self.join_tables(leaf_id))

    def join_tables(self, leaf_id: str) -> p.LeafPayload:
        """Group-level join of a leaf's IT rows with ST. No seq is decrypted here."""
        self._require_tree()
        leaf = self._leaves[leaf_id]
        grow = tuple(self.it[i] for i in leaf.members)
        prune = tuple(self.it[i] for i in self._prune_members.get(leaf_id, ()))
        gids = sorted({r.gid for r in grow + prune})
        st_rows = tuple(sorted((s for g in gids for s in self._st_by_gid.get(g, ())),
                               key=lambda s: s.seq))
        return p.LeafPayload(grow, prune, st_rows, majority_label(leaf))

    def install_subtree(self, leaf_id: str, blob: bytes) -> p.Ack:
        self._require_tree()
        leaf = self._leaves.get(leaf_id)
        if leaf is None:
            raise ProtocolError(f"no base-tree leaf {leaf_id!r}")
        self.subtree_store[leaf_id] = bytes(blob)
        leaf.refined_ptr = leaf_id
        return p.Ack(leaf_id)

    # -- baselines -------------------------------------------------------------

    def predict_server_only(self, instance: Mapping):
        self._require_tree()
        self._check_instance(instance)
        return majority_label(route(self.base_tree, instance)[1])

    def export_all(self) -> p.RespTables:
        return p.RespTables(tuple(self.it), tuple(self.st))

    def store_encr_tree(self, blob: bytes) -> p.Ack:
        self.encr_tree = bytes(blob)
        return p.Ack(hashlib.sha256(self.encr_tree).hexdigest()[:16])

    def fetch_encr_tree(self) -> p.RespEncrTree:
        if self.encr_tree is None:
            raise ProtocolError("no encrypted tree stored")
        return p.RespEncrTree(self.encr_tree)

    # -- wire entry point --------------------------------------------------------

    def _dispatch(self, msg: p.Message) -> p.Message:
        if isinstance(msg, p.PredictRequest):
            return self.find_bdt_leaf(msg.instance)
        if isinstance(msg, p.InstallSubtree):
            return self.install_subtree(msg.leaf_id, msg.blob)
        if isinstance(msg, p.PredictServerOnly):
            return p.RespLabel(self.predict_server_only(msg.instance))
        if isinstance(msg, p.FetchAll):
            return self.export_all()
        if isinstance(msg, p.StoreEncrTree):
            return self.store_encr_tree(msg.blob)
        if isinstance(msg, p.FetchEncrTree):
            return self.fetch_encr_tree()
        raise ProtocolError(f"unexpected request {msg.name}")

    def _record(self, direction, msg_type, leaf_id, data):
        self.transcript.append(TranscriptRecord(time.time(), direction, msg_type, leaf_id, len(data), data))

    def handle(self, data: bytes) -> bytes:
        """Process one request frame and return the response frame."""
        with self._lock:
            try:
                msg = p.unframe(data)
            except ProtocolError as e:
                self._record("in", "Malformed", None, data)
                resp = p.ErrorResponse(str(e))
            else:
                self._record("in", msg.name, p.leaf_id_of(msg), data)
                try:
                    resp = self._dispatch(msg)
                except (ProtocolError, EmptyInputError) as e:
                    resp = p.ErrorResponse(str(e))
            out = p.frame(resp)
            self._record("out", resp.name, p.leaf_id_of(resp), out)
            return out

    def state_dump(self) -> dict:
        """Everything the server stores, for privacy audits."""
        return {
            "it": self.it,
            "st": self.st,
            "base_tree": self.base_tree,
            "subtree_store": dict(self.subtree_store),
            "encr_tree": self.encr_tree,
        }
