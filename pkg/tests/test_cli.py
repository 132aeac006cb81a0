import csv
import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from cdtl.cli import main
from cdtl.crypto import ClientKey
from cdtl.server import read_transcript

import synth
from conftest import ROOT


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def workspace(tmp_path):
    synth.write_csv(tmp_path / "d.csv", synth.sensitive_class_rows(200, 7))
    (tmp_path / "c.json").write_text(json.dumps(synth.config(tmp_path / "d.csv", folds=3)))
    return tmp_path


def test_keygen_seeded_is_stable(tmp_path):
    assert main(["keygen", "--out", str(tmp_path / "a.key"), "--seed", "x"]) == 0
    assert main(["keygen", "--out", str(tmp_path / "b.key"), "--seed", "x"]) == 0
    assert ClientKey.load(tmp_path / "a.key") == ClientKey.load(tmp_path / "b.key")


def test_anatomize_writes_tables(workspace):
    main(["keygen", "--out", str(workspace / "k.key")])
    rc = main(["anatomize", "--config", str(workspace / "c.json"), "--key", str(workspace / "k.key"),
               "--out", str(workspace / "tables")])
    assert rc == 0
    with open(workspace / "tables" / "it.csv") as f:
        header = next(csv.reader(f))
    assert header == ["x1", "x2", "x3", "y", "GID", "ESEQ"]
    with open(workspace / "tables" / "st.csv") as f:
        assert next(csv.reader(f)) == ["SEQ", "GID", "s"]


def test_bench_writes_outputs(workspace):
    out = workspace / "out"
    assert main(["bench", "--config", str(workspace / "c.json"), "--out", str(out), "--max-folds", "2"]) == 0
    with open(out / "per_fold.csv") as f:
        assert len(list(csv.DictReader(f))) == 6
    assert (out / "summary.csv").exists()


def test_errors_exit_with_code_2(workspace):
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({**synth.config(workspace / "d.csv"), "class_attr": "s"}))
    assert main(["bench", "--config", str(bad), "--out", str(workspace / "o")]) == 2


def _cli(*args):
    return [sys.executable, "-m", "cdtl.cli", *args]


def _wait_listening(port, proc, timeout=20):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if proc.poll() is not None:
            raise RuntimeError(proc.stderr.read())
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.1)
    raise TimeoutError("server did not start")


def test_serve_and_predict_over_tcp(workspace):
    env = {**os.environ, "PYTHONPATH": str(ROOT / "src")}
    w = str(workspace)
    subprocess.run(_cli("keygen", "--out", f"{w}/k.key"), check=True, env=env)
    subprocess.run(_cli("anatomize", "--config", f"{w}/c.json", "--key", f"{w}/k.key", "--out", f"{w}/t"),
                   check=True, env=env)
    with open(workspace / "query.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(synth.HEADER)
        wr.writerows(synth.sensitive_class_rows(20, 99))
    port = _free_port()
    server = subprocess.Popen(_cli("serve", "--it", f"{w}/t/it.csv", "--st", f"{w}/t/st.csv",
                                   "--config", f"{w}/c.json", "--listen", f"127.0.0.1:{port}",
                                   "--transcript", f"{w}/transcript.jsonl"),
                              env=env, stderr=subprocess.PIPE, text=True)
    try:
        _wait_listening(port, server)
        labels = {}
        for mode in ("cdtl", "cdbsl", "cnl"):
            args = ["predict", "--mode", mode, "--server", f"127.0.0.1:{port}", "--key", f"{w}/k.key",
                    "--input", f"{w}/query.csv", "--output", f"{w}/{mode}.csv", "--config", f"{w}/c.json"]
            if mode == "cnl":
                args.append("--train")
            subprocess.run(_cli(*args), check=True, env=env)
            with open(workspace / f"{mode}.csv") as f:
                rows = list(csv.DictReader(f))
            assert len(rows) == 20
            labels[mode] = [r["label"] for r in rows]
            assert all(r["label"] in ("pos", "neg") for r in rows)
        # without a config the schema comes from the headers and flags
        subprocess.run(_cli("predict", "--mode", "cdtl", "--server", f"127.0.0.1:{port}", "--key", f"{w}/k.key",
                            "--input", f"{w}/query.csv", "--output", f"{w}/plain.csv",
                            "--sensitive", "s", "--class", "y"), check=True, env=env)
        with open(workspace / "plain.csv") as f:
            assert [r["label"] for r in csv.DictReader(f)] == labels["cdtl"]
    finally:
        server.send_signal(signal.SIGINT)
        server.wait(timeout=20)
    kinds = {r.msg_type for r in read_transcript(workspace / "transcript.jsonl")}
    assert {"PredictRequest", "PredictServerOnly", "FetchAll", "FetchEncrTree"} <= kinds
