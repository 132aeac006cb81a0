import csv
import json
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from cdtl import protocol as p
from cdtl.anatomize import ITRow
from cdtl.bench import (ExperimentConfig, audit_transcript, describe, emit_report, quartiles,
                        run_experiment)
from cdtl.dtree import serialize
from cdtl.errors import ConfigError, EligibilityError
from cdtl.server import TranscriptRecord

import oracles
import synth
from conftest import make_dataset
from helpers import instance, setup


@pytest.fixture(scope="module")
def strong_cfg(tmp_path_factory):
    path = synth.write_csv(tmp_path_factory.mktemp("synth") / "strong.csv", synth.sensitive_class_rows(600, 4))
    return ExperimentConfig.from_dict(synth.config(path, "strong", folds=5))


@pytest.fixture(scope="module")
def strong_report(strong_cfg):
    return run_experiment(strong_cfg)


# -- config --------------------------------------------------------------------

def test_load_toml_and_json(tmp_path):
    data = synth.write_csv(tmp_path / "d.csv", synth.sensitive_class_rows(40, 0))
    (tmp_path / "c.toml").write_text(
        'name = "t"\ndata = "d.csv"\nsensitive = "s"\nclass_attr = "y"\nl = 3\nbinary = true\n')
    (tmp_path / "c.json").write_text(json.dumps(
        {"name": "t", "data": "d.csv", "sensitive": "s", "class_attr": "y", "l": 3, "binary": True}))
    a = ExperimentConfig.load(tmp_path / "c.toml")
    b = ExperimentConfig.load(tmp_path / "c.json")
    assert a == b
    assert a.data_path() == data
    assert [x.name for x in a.attributes] == list(synth.HEADER)
    assert a.params.binary and a.l == 3


def test_bundled_configs_load():
    from conftest import CONFIGS
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = ExperimentConfig.load(path)
        assert cfg.data_path().exists(), path


@pytest.mark.parametrize("bad", [{"colour": "red"}, {"class_attr": "s"}, {"l": 0},
                                 {"transport": "pigeon"}, {"numeric": ["nope"]}, {"max_folds": 11}])
def test_config_rejects(tmp_path, bad):
    path = synth.write_csv(tmp_path / "d.csv", synth.sensitive_class_rows(40, 0))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**synth.config(path), **bad})


# -- quartiles -------------------------------------------------------------------

def test_quartiles_one_to_ten():
    assert quartiles(range(1, 11)) == (3.25, 5.5, 7.75)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=40))
def test_quartiles_match_oracle(values):
    ours = quartiles(values)
    for q, frac in zip(ours, (0.25, 0.5, 0.75)):
        assert q == pytest.approx(oracles.quantile(values, frac), rel=1e-9, abs=1e-6)
    d = describe(values)
    assert d["min"] <= d["q1"] <= d["median"] <= d["q3"] <= d["max"]


def test_quartiles_single_value():
    assert quartiles([2.0]) == (2.0, 2.0, 2.0)


# -- report ------------------------------------------------------------------------

def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_emit_report_ten_folds(tmp_path):
    path = synth.write_csv(tmp_path / "d.csv", synth.sensitive_class_rows(200, 2))
    report = run_experiment(ExperimentConfig.from_dict(synth.config(path)))
    per_fold, summary, audit = emit_report(report, tmp_path / "out")
    assert len(_rows(per_fold)) == 30
    summ = _rows(summary)
    acc = [r for r in summ if r["metric"] == "accuracy"]
    assert {r["algorithm"] for r in acc} == {"cdbsl", "cnl", "cdtl"}
    assert all(r["n"] == "10" for r in acc)
    assert {r["algorithm"] for r in summ if r["metric"] == "ets"} == {"cdtl"}
    assert "total violations: 0" in audit.read_text()


def test_emit_report_single_fold(tmp_path):
    path = synth.write_csv(tmp_path / "d.csv", synth.sensitive_class_rows(200, 2))
    report = run_experiment(ExperimentConfig.from_dict(synth.config(path, max_folds=1)))
    per_fold, _, _ = emit_report(report, tmp_path / "out")
    assert len(_rows(per_fold)) == 3


def test_metric_ranges(strong_report):
    for r in strong_report.rows:
        assert 0 <= r.accuracy <= 1
    for r in strong_report.select("cdtl"):
        assert r.ets > 0
        assert 0 < r.ms_train <= r.ms_grow <= 1
        assert r.bdt_leaves >= 2 and r.ms_grow < 1


def test_accuracy_trend_strong_sensitive(strong_report):
    m = {a: strong_report.mean(a, "accuracy") for a in ("cdbsl", "cnl", "cdtl")}
    assert m["cnl"] >= m["cdtl"] >= m["cdbsl"]


def test_counter_fixture_runs(tmp_path):
    # the sensitive value carries no signal; only cnl vs cdbsl is compared
    path = synth.write_csv(tmp_path / "d.csv", synth.identifying_class_rows(400, 5))
    report = run_experiment(ExperimentConfig.from_dict(synth.config(path, folds=5)))
    assert report.mean("cnl", "accuracy") >= report.mean("cdbsl", "accuracy") - 0.05
    assert not report.violations


def test_work_bound_every_fold(strong_report):
    cnl = {r.fold: r.learn_rows for r in strong_report.select("cnl")}
    for r in strong_report.select("cdtl"):
        assert r.learn_rows <= cnl[r.fold]


def test_rerun_is_deterministic(strong_cfg, strong_report):
    again = run_experiment(strong_cfg, audit=False)
    for a, b in zip(strong_report.rows, again.rows):
        assert (a.fold, a.algorithm, a.accuracy, a.ms_train, a.ms_grow, a.learn_rows) == \
               (b.fold, b.algorithm, b.accuracy, b.ms_train, b.ms_grow, b.learn_rows)


def test_single_leaf_base_tree(tmp_path):
    path = synth.write_csv(tmp_path / "d.csv", synth.constant_identifier_rows(200, 1))
    report = run_experiment(ExperimentConfig.from_dict(synth.config(path)))
    for r in report.select("cdtl"):
        assert r.bdt_leaves == 1
        assert r.ms_grow == 1.0
        assert r.ms_train == pytest.approx(r.n_grow / r.n_train)
        assert r.ms_train == pytest.approx(0.8, abs=0.01)


def test_ineligible_dataset_raises(tmp_path):
    rows = [r[:3] + ("s0" if i % 3 else r[3],) + r[4:] for i, r in enumerate(synth.sensitive_class_rows(60, 0))]
    path = synth.write_csv(tmp_path / "d.csv", rows)
    with pytest.raises(EligibilityError, match="s0"):
        run_experiment(ExperimentConfig.from_dict(synth.config(path)))
    report = run_experiment(ExperimentConfig.from_dict(synth.config(path, suppress_ineligible=True, max_folds=2)))
    assert all(r.suppressed > 0 for r in report.rows)


def test_tcp_bench_matches_loopback(strong_cfg, strong_report):
    cfg = replace(strong_cfg, transport="tcp", max_folds=1)
    tcp = run_experiment(cfg)
    loop = [r for r in strong_report.rows if r.fold == 0]
    assert [r.accuracy for r in tcp.rows] == [r.accuracy for r in loop]
    assert all(r.network_seconds > 0 for r in tcp.rows)
    assert not tcp.violations


# -- audit -------------------------------------------------------------------------

def _run_all_modes(key):
    ds = make_dataset(80, seed=11)
    logs = []
    for mode in ("cdtl", "cdbsl", "cnl"):
        server, client = setup(ds, key, train=mode != "cnl")
        if mode == "cnl":
            client.train_cnl(0)
        for row in ds.rows[:30]:
            getattr(client, f"predict_{mode}")(instance(ds, row))
        logs.append((server, audit_transcript(server.transcript, key, ds.schema, 2, server.state_dump())))
    return ds, logs


def test_audit_clean_runs(key):
    _, logs = _run_all_modes(key)
    for server, report in logs:
        assert report.ok, report.violations
        assert report.frames == len(server.transcript)


def _record(msg):
    data = p.frame(msg)
    return TranscriptRecord(0.0, "out", msg.name, None, len(data), data)


def test_audit_flags_plaintext_seq(key):
    ds, logs = _run_all_modes(key)
    server = logs[0][0]
    payload = server.join_tables(server.base_tree.leaves()[0][0])
    row = payload.it_rows[0]
    leaked = ITRow(row.values, row.gid, (0).to_bytes(8, "big"))
    bad = p.RespLeafInstances("/x", p.LeafPayload((leaked,) + payload.it_rows[1:], payload.prune_rows,
                                                   payload.st_rows, payload.default_label))
    transcript = list(server.transcript) + [_record(bad)]
    report = audit_transcript(transcript, key, ds.schema)
    assert len(report.violations) == 1
    assert "sequence number" in report.violations[0]


def test_audit_flags_other_leaks(key):
    ds, logs = _run_all_modes(key)
    server = logs[0][0]
    tree_bytes = serialize(server.base_tree)
    payload = server.join_tables(server.base_tree.leaves()[0][0])
    lone = p.LeafPayload(payload.it_rows[:1], (), tuple(s for s in payload.st_rows
                                                       if s.gid == payload.it_rows[0].gid)[:1], "yes")
    cases = [
        p.PredictRequest({"age": 30.0, "disease": "d0"}),
        p.InstallSubtree("/", tree_bytes),
        p.RespEncrSubtree("/", b"\x00" * 64),
        p.RespLeafInstances("/", lone),
    ]
    for msg in cases:
        report = audit_transcript([_record(msg)], key, ds.schema)
        assert len(report.violations) == 1, msg.name


def test_audit_checks_server_state(key):
    ds, logs = _run_all_modes(key)
    server = logs[0][0]
    state = server.state_dump()
    state["subtree_store"] = {"/": serialize(server.base_tree)}
    report = audit_transcript([], key, ds.schema, state=state)
    assert len(report.violations) == 1
