"""Command line entry point: keygen, anatomize, serve, predict, bench."""
from __future__ import annotations

import argparse
import csv
import logging
import signal
import sys
import threading
from pathlib import Path

from .anatomize import anatomize, check_eligibility, read_tables, suppress_to_eligible, write_tables
from .bench import ExperimentConfig, emit_report, load_dataset, run_experiment
from .client import PHASES, Client
from .crypto import ClientKey
from .dataset import CATEGORICAL, NUMERIC, Attribute, Schema
from .dtree import LearnParams
from .errors import CdtlError, ConfigError
from .server import Server, write_transcript
from .transport import TcpTransport, parse_address, serve_tcp

log = logging.getLogger("cdtl")


def _numeric_names(schema) -> set[str]:
    return {a.name for a in schema.attributes if a.numeric}


def cmd_keygen(args) -> int:
    key = ClientKey.from_seed(args.seed) if args.seed is not None else ClientKey.generate()
    key.save(args.out)
    log.info("wrote key to %s", args.out)
    return 0


def cmd_anatomize(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    ds = load_dataset(cfg)
    l = args.l or cfg.l
    if cfg.suppress_ineligible and not check_eligibility(ds, l):
        ds, removed = suppress_to_eligible(ds, l, cfg.anatomy_seed)
        log.info("suppressed %d rows to reach %d-eligibility", removed, l)
    it, st = anatomize(ds, l, ClientKey.load(args.key), cfg.anatomy_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tables(it, st, ds.schema, out / "it.csv", out / "st.csv")
    log.info("wrote %d IT rows and %d ST rows to %s", len(it), len(st), out)
    return 0


def _split_names(text: str | None) -> list[str]:
    return [n.strip() for n in text.split(",") if n.strip()] if text else []


def _params(args, cfg: ExperimentConfig | None) -> tuple[LearnParams, float, int]:
    if cfg is not None:
        return cfg.params, cfg.prune_fraction, cfg.prune_seed
    return (LearnParams(args.min_leaf, args.binary_splits, args.leaf_threshold),
            args.prune_fraction, args.prune_seed)


def _schema_from_columns(columns, sensitive: str, class_attr: str | None, numeric) -> Schema:
    if not class_attr:
        raise ConfigError("--class is required without --config")
    names = list(columns)
    if class_attr not in names:
        raise ConfigError(f"class attribute {class_attr!r} is not among the columns {names}")
    if sensitive not in names:
        names.append(sensitive)
    attrs = [Attribute(n, NUMERIC if n in numeric else CATEGORICAL) for n in names]
    return Schema(tuple(attrs), sensitive, class_attr)


def cmd_serve(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    if cfg is not None:
        schema = load_dataset(cfg).schema
        numeric = _numeric_names(schema)
    else:
        numeric = set(_split_names(args.numeric))
    ident, sensitive, it, st = read_tables(args.it, args.st, numeric=numeric)
    if cfg is None:
        schema = _schema_from_columns(ident, sensitive, args.class_attr, numeric)
    params, fraction, seed = _params(args, cfg)
    server = Server(it, st, schema, params=params, prune_fraction=fraction, prune_seed=seed)
    leaves = server.train_base()
    host, port = parse_address(args.listen)
    tcp = serve_tcp(server, host, port)
    log.info("base tree has %d leaves; listening on %s:%d", leaves, *tcp.server_address[:2])
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        tcp.shutdown()
        if args.transcript:
            write_transcript(server.transcript, args.transcript)
            log.info("wrote %d transcript records to %s", len(server.transcript), args.transcript)
    return 0


def _read_instances(path, schema, missing: str | None):
    kinds = {a.name: a.numeric for a in schema.attributes}
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            ins = {}
            for name, value in rec.items():
                if name not in kinds:
                    raise ConfigError(f"input column {name!r} is not in the schema")
                value = value.strip()
                if missing is not None and value == missing:
                    continue
                ins[name] = float(value) if kinds[name] else value
            yield ins


def cmd_predict(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    if cfg is not None:
        schema = load_dataset(cfg).schema
    else:
        if not args.sensitive:
            raise ConfigError("--sensitive is required without --config")
        with open(args.input, newline="", encoding="utf-8") as f:
            header = [h.strip() for h in next(csv.reader(f))]
        schema = _schema_from_columns(header, args.sensitive, args.class_attr,
                                      set(_split_names(args.numeric)))
    params, fraction, seed = _params(args, cfg)
    missing = args.missing if args.missing is not None else (cfg.missing if cfg else "?")
    key = ClientKey.load(args.key)
    with TcpTransport(*parse_address(args.server)) as transport:
        client = Client(transport, key, schema, params)
        if args.mode == "cnl" and args.train:
            client.train_cnl(seed, fraction)
        predict = {"cdtl": client.predict_cdtl, "cdbsl": client.predict_cdbsl,
                   "cnl": client.predict_cnl}[args.mode]
        counters = ["bytes_sent", "bytes_received", "seq_decrypts", "blob_decrypts", "learn_calls", "learn_rows"]
        w = csv.writer(args.output)
        w.writerow(["row", "label", "true_label"] + counters + [f"{ph}_s" for ph in PHASES])
        for n, ins in enumerate(_read_instances(args.input, schema, missing)):
            c = client.counters
            before = [getattr(c, k) for k in counters] + [c.seconds[ph] for ph in PHASES]
            truth = ins.pop(schema.class_attr, "")
            label = predict(ins)
            after = [getattr(c, k) for k in counters] + [c.seconds[ph] for ph in PHASES]
            deltas = [x - y for x, y in zip(after, before)]
            w.writerow([n, label, truth] + deltas[:len(counters)]
                       + [f"{d:.6f}" for d in deltas[len(counters):]])
    return 0


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.transport:
        cfg.transport = args.transport
    if args.max_folds:
        cfg.max_folds = args.max_folds
    report = run_experiment(cfg, progress=log.info)
    paths = emit_report(report, args.out)
    for row in report.summary():
        if row["metric"] in ("accuracy", "ets", "ms_train", "ms_grow"):
            log.info("%-5s %-9s mean %.4f  median %.4f", row["algorithm"], row["metric"], row["mean"], row["median"])
    log.info("finished in %.1fs; wrote %s", report.seconds, ", ".join(str(p) for p in paths))
    return 1 if report.violations else 0


def _schema_options(s):
    g = s.add_argument_group("schema and learning options (used without --config)")
    g.add_argument("--class", dest="class_attr")
    g.add_argument("--numeric", help="comma-separated numeric attributes")
    g.add_argument("--binary-splits", action="store_true")
    g.add_argument("--leaf-threshold", type=int)
    g.add_argument("--min-leaf", type=int, default=2)
    g.add_argument("--prune-fraction", type=float, default=0.2)
    g.add_argument("--prune-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdtl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", help="create a client key file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", help="derive the key deterministically (testing only)")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("anatomize", help="split a dataset into IT and ST CSV files")
    s.add_argument("--config", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--out", required=True, help="directory for it.csv and st.csv")
    s.add_argument("--l", type=int)
    s.set_defaults(func=cmd_anatomize)

    s = sub.add_parser("serve", help="train the base tree and serve it over TCP")
    s.add_argument("--it", required=True)
    s.add_argument("--st", required=True)
    s.add_argument("--config", help="experiment config supplying schema and learning parameters")
    _schema_options(s)
    s.add_argument("--listen", default="127.0.0.1:7340")
    s.add_argument("--transcript", help="write the transcript here on shutdown")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("predict", help="classify the rows of a CSV through a running server")
    s.add_argument("--mode", choices=("cdtl", "cdbsl", "cnl"), required=True)
    s.add_argument("--server", required=True, help="host:port")
    s.add_argument("--key", required=True)
    s.add_argument("--input", required=True, help="CSV of instances; without --config it must hold every column in data-file order "
                        "(class cells may be empty)")
    s.add_argument("--output", type=argparse.FileType("w"), default=sys.stdout)
    s.add_argument("--config", help="experiment config supplying schema and learning parameters")
    s.add_argument("--sensitive", help="sensitive attribute (without --config)")
    _schema_options(s)
    s.add_argument("--missing", help='cell value treated as missing (default: the config\'s marker, else "?")')
    s.add_argument("--train", action="store_true", help="cnl mode: fetch the tables and store a tree first")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bench", help="cross-validated comparison of the three algorithms")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--transport", choices=("loopback", "tcp"))
    s.add_argument("--max-folds", type=int)
    s.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CdtlError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
