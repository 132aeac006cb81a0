"""The data owner's side: predictions in the three modes and leaf refinement.

The client keeps no model between predictions. In cdtl mode it only ever
holds one leaf's candidate rows; in cnl mode it fetches and decrypts the
whole stored tree for every prediction.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

from . import protocol as p
from .anatomize import reconstruct, rejoin
from .crypto import ClientKey, decrypt_blob, encrypt_blob
from .dataset import Schema, split_prune_indices
from .dtree import DecisionTree, LearnParams, deserialize, learn, predict, prune_reduced_error, serialize
from .errors import ProtocolError

PHASES = ("network", "crypto", "learn", "infer")


@dataclass
class CostCounters:
    requests: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    seq_decrypts: int = 0
    blob_decrypts: int = 0
    encrypts: int = 0
    learn_calls: int = 0
    learn_rows: int = 0
    prune_rows: int = 0
    refines: int = 0
    installs: int = 0
    peak_tuples: int = 0
    seconds: dict = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))

    @property
    def decrypts(self) -> int:
        return self.seq_decrypts + self.blob_decrypts

    def client_seconds(self, include_network: bool) -> float:
        total = self.seconds["crypto"] + self.seconds["learn"] + self.seconds["infer"]
        return total + (self.seconds["network"] if include_network else 0.0)

    def hold(self, tuples: int):
        self.peak_tuples = max(self.peak_tuples, tuples)

    def as_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "seconds"}
        row.update({f"{k}_s": v for k, v in self.seconds.items()})
        return row


class Client:
    def __init__(self, transport, key: ClientKey, schema: Schema,
                 params: LearnParams = LearnParams(), cache_subtrees: bool = False):
        self.transport = transport
        self.key = key
        self.schema = schema
        # the leaf-size threshold is a base-tree knob; client trees never use it
        self.params = replace(params, max_leaf_size=None)
        self.counters = CostCounters()
        # off by default: a cache changes the client's storage footprint and timings
        self.cache_subtrees = cache_subtrees
        self._subtrees: dict[str, DecisionTree] = {}

    @contextmanager
    def _timed(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.counters.seconds[phase] += time.perf_counter() - t0

    def _call(self, msg: p.Message, expect: tuple[type, ...]) -> p.Message:
        data = p.frame(msg)
        with self._timed("network"):
            raw = self.transport.request(data)
        c = self.counters
        c.requests += 1
        c.bytes_sent += len(data)
        c.bytes_received += len(raw)
        resp = p.unframe(raw)
        if isinstance(resp, p.ErrorResponse):
            raise ProtocolError(f"server refused {msg.name}: {resp.message}")
        if not isinstance(resp, expect):
            raise ProtocolError(f"expected {[e.__name__ for e in expect]}, got {resp.name}")
        return resp

    def outbound(self, ins: Mapping) -> dict:
        """The instance as sent to the server: no class value, no sensitive value."""
        drop = {self.schema.sensitive, self.schema.class_attr}
        return {k: v for k, v in ins.items() if k not in drop and v is not None}

    def _open_tree(self, blob: bytes) -> DecisionTree:
        with self._timed("crypto"):
            data = decrypt_blob(self.key, blob)
        self.counters.blob_decrypts += 1
        with self._timed("infer"):
            return deserialize(data)

    def _seal_tree(self, tree: DecisionTree) -> bytes:
        with self._timed("crypto"):
            blob = encrypt_blob(self.key, serialize(tree)).to_bytes()
        self.counters.encrypts += 1
        return blob

    def _grow(self, rows, prune_rows) -> DecisionTree:
        allowed = [n for n in self.schema.identifying if n != self.schema.class_attr]
        allowed.append(self.schema.sensitive)
        with self._timed("learn"):
            tree = learn(rows, self.schema.attributes, self.schema.class_attr, allowed, self.params)
            tree = prune_reduced_error(tree, prune_rows, self.params)
        c = self.counters
        c.learn_calls += 1
        c.learn_rows += len(rows)
        c.prune_rows += len(prune_rows)
        return tree

    # -- collaborative --------------------------------------------------------

    def predict_cdtl(self, ins: Mapping):
        resp = self._call(p.PredictRequest(self.outbound(ins)),
                          (p.RespEncrSubtree, p.RespLeafInstances))
        if isinstance(resp, p.RespEncrSubtree):
            tree = self._subtrees.get(resp.leaf_id) or self._open_tree(resp.blob)
            if self.cache_subtrees:
                self._subtrees[resp.leaf_id] = tree
        else:
            if not resp.payload.it_rows:
                # a base leaf nobody reached during training; nothing to refine
                return resp.payload.default_label
            tree, _ = self.refine_leaf(resp.leaf_id, resp.payload)
        with self._timed("infer"):
            return predict(tree, ins)

    def refine_leaf(self, leaf_id: str, payload: p.LeafPayload) -> tuple[DecisionTree, bytes]:
        """Rebuild the leaf's true tuples, learn a subtree over them and install it encrypted."""
        self.counters.hold(payload.tuples_held)
        with self._timed("crypto"):
            grow = rejoin(payload.it_rows, payload.st_rows, self.key)
            prune = rejoin(payload.prune_rows, payload.st_rows, self.key)
        self.counters.seq_decrypts += len(grow) + len(prune)
        join = self.schema.join
        tree = self._grow([join(i, s) for i, s in grow], [join(i, s) for i, s in prune])
        blob = self._seal_tree(tree)
        self._call(p.InstallSubtree(leaf_id, blob), (p.Ack,))
        self.counters.refines += 1
        self.counters.installs += 1
        if self.cache_subtrees:
            self._subtrees[leaf_id] = tree
        return tree, blob

    # -- server-only baseline -----------------------------------------------

    def predict_cdbsl(self, ins: Mapping):
        return self._call(p.PredictServerOnly(self.outbound(ins)), (p.RespLabel,)).label

    # -- client-naive baseline -------------------------------------------------

    def train_cnl(self, prune_seed: int, prune_fraction: float = 0.2) -> str:
        """Fetch both tables, rebuild the data, learn, and store the tree encrypted.

        Uses the same grow/prune split the server derives from ``prune_seed``.
        The plaintext tree is dropped afterwards.
        """
        tables = self._call(p.FetchAll(), (p.RespTables,))
        self.counters.hold(len(tables.it) + len(tables.st))
        with self._timed("crypto"):
            ds = reconstruct(tables.it, tables.st, self.key, self.schema)
        self.counters.seq_decrypts += len(tables.it)
        grow, prune = split_prune_indices(len(ds), prune_fraction, prune_seed)
        tree = self._grow([ds.rows[i] for i in grow], [ds.rows[i] for i in prune])
        blob = self._seal_tree(tree)
        ack = self._call(p.StoreEncrTree(blob), (p.Ack,))
        del tree
        return ack.leaf_id

    def predict_cnl(self, ins: Mapping):
        resp = self._call(p.FetchEncrTree(), (p.RespEncrTree,))
        tree = self._open_tree(resp.blob)
        with self._timed("infer"):
            return predict(tree, ins)
