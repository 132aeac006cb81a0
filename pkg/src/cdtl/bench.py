"""Cross-validated comparison of cdbsl, cnl and cdtl, plus the transcript audit.

For every fold the training part is anatomized once and each algorithm runs
against its own fresh server holding the same tables and the same grow/prune
split. Accuracy, client-side cost counters, ets and ms are collected per fold
and algorithm.
"""
from __future__ import annotations

import csv
import json
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

from . import protocol as p
from .anatomize import ESEQ, GID, anatomize, check_eligibility, suppress_to_eligible
from .client import Client
from .crypto import ClientKey, decrypt_blob, decrypt_seq
from .dataset import Attribute, PersonDataset, Schema, discretize, load_csv, stratified_fold_indices
from .dtree import Internal, LearnParams, deserialize
from .errors import AuthenticationError, ConfigError, FormatError, ProtocolError
from .server import Server, TranscriptRecord
from .transport import LoopbackTransport, TcpTransport, serve_tcp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ALGORITHMS = ("cdbsl", "cnl", "cdtl")


@dataclass
class ExperimentConfig:
    name: str
    data: str
    sensitive: str
    class_attr: str
    # column names in file order; read from the CSV header when empty
    attributes: list = field(default_factory=list)
    # attributes parsed as numbers; everything else is categorical
    numeric: list = field(default_factory=list)
    l: int = 2
    binary: bool = False
    folds: int = 10
    fold_seed: int = 0
    prune_seed: int = 0
    anatomy_seed: int = 0
    key_seed: int = 0
    prune_fraction: float = 0.2
    min_leaf: int = 2
    # base-tree leaves larger than this keep being split
    leaf_threshold: int | None = None
    # numeric attribute -> number of equal-width bins
    discretize: dict = field(default_factory=dict)
    # cell value marking a missing entry; rows holding it are dropped. None or "" keeps every row.
    missing: str | None = "?"
    # drop rows of over-represented sensitive values from each training fold
    suppress_ineligible: bool = False
    # run only the first n folds (smoke runs)
    max_folds: int | None = None
    transport: str = "loopback"
    base_dir: str = "."

    def __post_init__(self):
        if self.missing == "":
            self.missing = None
        if not self.attributes:
            self.attributes = _csv_header(self.data_path())
        self.attributes = [a if isinstance(a, Attribute) else _attribute(a, self.numeric)
                           for a in self.attributes]
        if self.class_attr == self.sensitive:
            raise ConfigError("class attribute and sensitive attribute must differ")
        if self.l < 1:
            raise ConfigError("l must be at least 1")
        if self.transport not in ("loopback", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.max_folds is not None and not 1 <= self.max_folds <= self.folds:
            raise ConfigError("max_folds must be between 1 and folds")
        names = {a.name for a in self.attributes}
        for n in (self.sensitive, self.class_attr, *self.discretize, *self.numeric):
            if n not in names:
                raise ConfigError(f"attribute {n!r} is not declared")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        d.setdefault("base_dir", str(base_dir))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                d = tomllib.load(f)
        elif path.suffix == ".json":
            d = json.loads(path.read_text(encoding="utf-8"))
        else:
            raise ConfigError(f"config must be .toml or .json, got {path.name}")
        return cls.from_dict(d, base_dir=path.parent)

    @property
    def schema(self) -> Schema:
        return Schema(tuple(self.attributes), self.sensitive, self.class_attr)

    @property
    def params(self) -> LearnParams:
        return LearnParams(self.min_leaf, self.binary, self.leaf_threshold)

    def data_path(self) -> Path:
        path = Path(self.data)
        return path if path.is_absolute() else Path(self.base_dir) / path


def _csv_header(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as f:
        return [h.strip() for h in next(csv.reader(f))]


def _attribute(entry, numeric=()) -> Attribute:
    if isinstance(entry, str):
        return Attribute(entry, "numeric" if entry in numeric else "categorical")
    if isinstance(entry, dict):
        return Attribute(entry["name"], entry.get("kind", "categorical"), entry.get("domain"))
    return Attribute(*entry)


def load_dataset(cfg: ExperimentConfig) -> PersonDataset:
    ds = load_csv(cfg.data_path(), cfg.schema, missing=cfg.missing)
    for attr, bins in cfg.discretize.items():
        ds = discretize(ds, attr, int(bins))
    return ds


# ---------------------------------------------------------------------------
# audit

@dataclass
class AuditReport:
    frames: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def flag(self, where: str, what: str):
        self.violations.append(f"{where}: {what}")


def _blob_problem(blob: bytes, key: ClientKey, cache: dict) -> str | None:
    """Why ``blob`` is not a properly sealed tree, or None if it is."""
    if blob in cache:
        return cache[blob]
    problem = None
    try:
        deserialize(blob)
        problem = "tree readable without the key"
    except FormatError:
        try:
            deserialize(decrypt_blob(key, blob))
        except AuthenticationError:
            problem = "blob does not authenticate under the client key"
        except FormatError:
            problem = "decrypted blob is not a tree"
    cache[blob] = problem
    return problem


def _eseq_failures(rows, key: ClientKey) -> int:
    bad = 0
    for r in rows:
        try:
            decrypt_seq(key, r.eseq)
        except AuthenticationError:
            bad += 1
    return bad


def _linkage_problem(it_rows, st_rows, l: int) -> str | None:
    """Check that every group an IT row is shipped with is l-diverse in the message."""
    groups: dict = {}
    for s in st_rows:
        groups.setdefault(s.gid, []).append(s.value)
    for gid in sorted({r.gid for r in it_rows}):
        values = groups.get(gid, [])
        top = max((values.count(v) for v in set(values)), default=0)
        if not values or top * l > len(values):
            return f"group {gid} shipped with {len(values)} sensitive value(s), not {l}-diverse"
    return None


def _tree_leaks(tree, schema: Schema) -> set:
    banned = {schema.sensitive, GID, ESEQ}
    found, stack = set(), [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, Internal):
            if node.test.attr in banned:
                found.add(node.test.attr)
            stack.extend(node.children)
    return found


def audit_transcript(transcript: Sequence[TranscriptRecord], key: ClientKey, schema: Schema,
                     l: int = 2, state: dict | None = None) -> AuditReport:
    """Look for anything a curious server could use to link rows to sensitive values.

    Flags: request instances carrying the sensitive attribute, IT rows whose
    ESEQ is not a ciphertext under the client key, IT rows shipped with a
    group that is not l-diverse, and tree blobs that either parse without the
    key or fail to authenticate with it. With ``state`` (``Server.state_dump()``)
    the stored tables, blobs and base tree are checked as well. At most one
    violation is reported per frame.
    """
    report = AuditReport()
    cache: dict = {}
    for n, rec in enumerate(transcript):
        report.frames += 1
        where = f"frame {n} ({rec.direction} {rec.msg_type})"
        try:
            msg = p.unframe(rec.frame)
        except ProtocolError:
            continue
        problem = None
        if isinstance(msg, (p.PredictRequest, p.PredictServerOnly)):
            if schema.sensitive in msg.instance:
                problem = f"request carries sensitive attribute {schema.sensitive!r}"
        elif isinstance(msg, (p.RespLeafInstances, p.RespTables)):
            if isinstance(msg, p.RespLeafInstances):
                it_rows = msg.payload.it_rows + msg.payload.prune_rows
                st_rows = msg.payload.st_rows
            else:
                it_rows, st_rows = msg.it, msg.st
            bad = _eseq_failures(it_rows, key)
            if bad:
                problem = f"{bad} IT row(s) carry a sequence number that is not a valid ciphertext"
            else:
                problem = _linkage_problem(it_rows, st_rows, l)
        elif isinstance(msg, (p.RespEncrSubtree, p.InstallSubtree, p.StoreEncrTree, p.RespEncrTree)):
            problem = _blob_problem(msg.blob, key, cache)
        if problem:
            report.flag(where, problem)

    if state is not None:
        bad = _eseq_failures(state["it"], key)
        if bad:
            report.flag("server state", f"{bad} stored IT row(s) without a valid ESEQ ciphertext")
        for leaf_id, blob in state["subtree_store"].items():
            problem = _blob_problem(blob, key, cache)
            if problem:
                report.flag(f"stored subtree {leaf_id}", problem)
        if state.get("encr_tree") is not None:
            problem = _blob_problem(state["encr_tree"], key, cache)
            if problem:
                report.flag("stored cnl tree", problem)
        if state.get("base_tree") is not None:
            leaks = _tree_leaks(state["base_tree"], schema)
            if leaks:
                report.flag("base tree", f"tests {sorted(leaks)}")
    return report


# ---------------------------------------------------------------------------
# experiment loop

@dataclass
class FoldResult:
    fold: int
    algorithm: str
    accuracy: float
    client_seconds: float
    network_seconds: float
    bytes_sent: int
    bytes_received: int
    requests: int
    peak_tuples: int
    learn_calls: int
    learn_rows: int
    decrypts: int
    encrypts: int
    refines: int
    n_train: int
    n_grow: int
    n_test: int
    suppressed: int
    bdt_leaves: int | None = None
    biggest_leaf: int | None = None
    ets: float | None = None
    ms_train: float | None = None
    ms_grow: float | None = None


@dataclass
class MetricsReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    audits: dict = field(default_factory=dict)
    seconds: float = 0.0

    def select(self, algorithm: str) -> list[FoldResult]:
        return [r for r in self.rows if r.algorithm == algorithm]

    def values(self, algorithm: str, metric: str) -> list:
        return [getattr(r, metric) for r in self.select(algorithm) if getattr(r, metric) is not None]

    def mean(self, algorithm: str, metric: str) -> float:
        return statistics.fmean(self.values(algorithm, metric))

    def summary(self) -> list[dict]:
        out = []
        for algo in ALGORITHMS:
            for metric in SUMMARY_METRICS:
                vals = self.values(algo, metric)
                if vals:
                    out.append({"algorithm": algo, "metric": metric, **describe(vals)})
        return out

    @property
    def violations(self) -> list[str]:
        return [f"fold {f} {a}: {v}" for (f, a), rep in sorted(self.audits.items()) for v in rep.violations]


SUMMARY_METRICS = ("accuracy", "client_seconds", "network_seconds", "bytes_sent", "bytes_received",
                   "peak_tuples", "learn_rows", "decrypts", "ets", "ms_train", "ms_grow")


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """Q1, median, Q3 by linear interpolation between order statistics."""
    vals = sorted(values)
    if not vals:
        raise ValueError("no values")
    if len(vals) == 1:
        return vals[0], vals[0], vals[0]
    q1, q2, q3 = statistics.quantiles(vals, n=4, method="inclusive")
    return q1, q2, q3


def describe(values: Sequence[float]) -> dict:
    q1, med, q3 = quartiles(values)
    return {"n": len(values), "min": min(values), "q1": q1, "median": med, "q3": q3,
            "max": max(values), "mean": statistics.fmean(values)}


class _Session:
    """A fresh server reachable through the configured transport."""

    def __init__(self, server: Server, kind: str):
        self.server = server
        self._tcp = None
        if kind == "tcp":
            self._tcp = serve_tcp(server, "127.0.0.1", 0)
            self.transport = TcpTransport(*self._tcp.server_address[:2])
        else:
            self.transport = LoopbackTransport(server)

    def close(self):
        self.transport.close()
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()


def _result(fold, algo, client: Client, correct: int, n_test: int, n_train: int, n_grow: int,
            suppressed: int, networked: bool) -> FoldResult:
    c = client.counters
    return FoldResult(
        fold=fold, algorithm=algo, accuracy=correct / n_test if n_test else 0.0,
        client_seconds=c.client_seconds(networked), network_seconds=c.seconds["network"],
        bytes_sent=c.bytes_sent, bytes_received=c.bytes_received, requests=c.requests,
        peak_tuples=c.peak_tuples, learn_calls=c.learn_calls, learn_rows=c.learn_rows,
        decrypts=c.decrypts, encrypts=c.encrypts, refines=c.refines,
        n_train=n_train, n_grow=n_grow, n_test=n_test, suppressed=suppressed)


def run_fold(cfg: ExperimentConfig, ds: PersonDataset, fold: int, test_idx: Sequence[int],
             audit: bool = True, transcripts: dict | None = None) -> tuple[list[FoldResult], dict]:
    """Run the three algorithms on one train/test split."""
    schema = ds.schema
    held = set(test_idx)
    train = ds.subset(i for i in range(len(ds)) if i not in held)
    test = ds.subset(test_idx)
    suppressed = 0
    if cfg.suppress_ineligible and not check_eligibility(train, cfg.l):
        train, suppressed = suppress_to_eligible(train, cfg.l, cfg.anatomy_seed + fold)
    key = ClientKey.from_seed(f"{cfg.key_seed}/{fold}")
    it, st = anatomize(train, cfg.l, key, cfg.anatomy_seed + fold)
    params = cfg.params
    networked = cfg.transport == "tcp"
    y = schema.index(schema.class_attr)
    instances = [{k: v for k, v in rec.items() if k != schema.class_attr} for rec in test.records()]
    labels = [r[y] for r in test.rows]

    results, audits = [], {}
    extra = {}
    for algo in ALGORITHMS:
        server = Server(it, st, schema, params=params, prune_fraction=cfg.prune_fraction,
                        prune_seed=cfg.prune_seed)
        session = _Session(server, cfg.transport)
        client = Client(session.transport, key, schema, params)
        try:
            if algo == "cnl":
                client.train_cnl(cfg.prune_seed, cfg.prune_fraction)
                predict = client.predict_cnl
            else:
                server.train_base()
                predict = client.predict_cdbsl if algo == "cdbsl" else client.predict_cdtl
                if algo == "cdtl":
                    extra = {"bdt_leaves": len(server.base_tree.leaves()),
                             "biggest_leaf": server.biggest_leaf()}
            correct = sum(1 for ins, lab in zip(instances, labels) if predict(ins) == lab)
        finally:
            session.close()
        results.append(_result(fold, algo, client, correct, len(test), len(train),
                               len(server.grow_idx), suppressed, networked))
        if audit:
            audits[(fold, algo)] = audit_transcript(server.transcript, key, schema, cfg.l,
                                                    server.state_dump())
        if transcripts is not None:
            transcripts[(fold, algo)] = list(server.transcript)

    by_algo = {r.algorithm: r for r in results}
    cdtl = by_algo["cdtl"]
    cdtl.bdt_leaves = extra["bdt_leaves"]
    cdtl.biggest_leaf = extra["biggest_leaf"]
    cnl_time = by_algo["cnl"].client_seconds
    cdtl.ets = cdtl.client_seconds / cnl_time if cnl_time > 0 else None
    cdtl.ms_train = cdtl.biggest_leaf / cdtl.n_train
    cdtl.ms_grow = cdtl.biggest_leaf / cdtl.n_grow
    return results, audits


def run_experiment(cfg: ExperimentConfig, *, audit: bool = True, transcripts: dict | None = None,
                   progress: Callable[[str], None] | None = None) -> MetricsReport:
    t0 = time.perf_counter()
    ds = load_dataset(cfg)
    if not cfg.suppress_ineligible and not check_eligibility(ds, cfg.l):
        # fail before any fold work; anatomize raises with the offending value
        anatomize(ds, cfg.l, ClientKey.from_seed(cfg.key_seed), cfg.anatomy_seed)
    report = MetricsReport(cfg)
    folds = stratified_fold_indices(ds, cfg.folds, cfg.fold_seed)
    for f, test_idx in enumerate(folds[:cfg.max_folds]):
        rows, audits = run_fold(cfg, ds, f, test_idx, audit=audit, transcripts=transcripts)
        report.rows.extend(rows)
        report.audits.update(audits)
        if progress:
            progress(f"{cfg.name} fold {f}: " + " ".join(f"{r.algorithm}={r.accuracy:.3f}" for r in rows))
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# output

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def emit_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "per_fold.csv", out / "summary.csv", out / "transcript_audit.txt"]

    names = [f.name for f in fields(FoldResult)]
    with open(paths[0], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in report.rows:
            w.writerow([_cell(getattr(r, n)) for n in names])

    cols = ["algorithm", "metric", "n", "min", "q1", "median", "q3", "max", "mean"]
    with open(paths[1], "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in report.summary():
            w.writerow({k: _cell(v) for k, v in row.items()})

    with open(paths[2], "w", encoding="utf-8") as f:
        f.write(f"experiment: {report.config.name}\n")
        if not report.audits:
            f.write("audit not run\n")
        for (fold, algo), rep in sorted(report.audits.items()):
            status = "ok" if rep.ok else f"{len(rep.violations)} violation(s)"
            f.write(f"fold {fold} {algo}: {rep.frames} frames, {status}\n")
            for v in rep.violations:
                f.write(f"  {v}\n")
        f.write(f"total violations: {len(report.violations)}\n")
    return paths


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["attributes"] = [[a.name, a.kind] for a in cfg.attributes]
    return d
