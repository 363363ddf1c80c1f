import csv
import json

import pytest

from conftest import NIGERIA
from coh.cli import main

REPLAY = f"--backend-kind=scripted_mock --backend-script={NIGERIA / 'replay.jsonl'}"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def base_run(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "run-coh", "--data", NIGERIA, "--out", out, "--max-in-flight", 1,
                          "--fusion-w", 0.0, *REPLAY.split())
    assert code == 0
    return out, json.loads(stdout)


def test_prepare(tmp_path, capsys):
    code, out, _ = run(capsys, "prepare", "--data", NIGERIA, "--out", tmp_path / "prep")
    stats = json.loads(out)
    assert code == 0 and stats["queries"] == 2 and stats["test"] == 1
    assert (tmp_path / "prep" / "queries.jsonl").read_text().count("\n") == 2


def test_run_coh_writes_cache(base_run):
    out, row = base_run
    assert row["variant"] == "coh" and row["n_queries"] == 2
    for name in ("records.jsonl", "manifest.json", "transcripts.jsonl", "metrics.csv", "per_query.jsonl"):
        assert (out / name).exists()
    ranks = [json.loads(line)["rank"] for line in (out / "per_query.jsonl").read_text().splitlines()]
    assert ranks[0] == 3


def test_fuse_eval_reuses_snapshot(base_run, capsys, tmp_path):
    out, _ = base_run
    graph = tmp_path / "graph.tsv"
    graph.write_text("0\t6\t1.0\n0\t3\t0.5\n1\t2\t0.9\n")
    code, stdout, _ = run(capsys, "fuse-eval", "--run", out, "--graph", graph, "--data", NIGERIA,
                          "--fusion-w", 1.0)
    assert code == 0
    row = json.loads(stdout)
    assert row["w"] == 1.0 and row["alpha"] == 0.3
    # w=1 puts the ground truth of query 0 (entity 6) first
    first = json.loads((out / "fused_per_query.jsonl").read_text().splitlines()[0])
    assert first["rank"] == 1


def test_sweep_is_byte_identical(base_run, capsys, tmp_path):
    out, _ = base_run
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert run(capsys, "sweep", "--run", out, "--param", "alpha", "--num-entities", 11, "--out", path)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert [float(r["alpha"]) for r in rows] == [0.1, 0.3, 0.5, 0.7, 0.9]


def test_sweep_without_run(capsys, tmp_path):
    code, _, err = run(capsys, "sweep", "--run", tmp_path / "missing", "--param", "w", "--num-entities", 5,
                       "--out", tmp_path / "x.csv")
    assert code == 2 and "run-coh first" in err


def test_ablate_no_is_rescores(base_run, capsys, tmp_path):
    out, _ = base_run
    code, stdout, _ = run(capsys, "ablate", "--kind", "no_is", "--base-run", out, "--data", NIGERIA,
                          "--out", tmp_path / "no_is", "--fusion-w", 0.0)
    assert code == 0 and json.loads(stdout)["variant"] == "coh_no_is"
    code, _, err = run(capsys, "ablate", "--kind", "no_is", "--data", NIGERIA, "--out", tmp_path / "x")
    assert code == 2 and "--base-run" in err


def test_ablate_no_lr_runs(capsys, tmp_path):
    code, stdout, _ = run(capsys, "ablate", "--kind", "no_lr", "--data", NIGERIA, "--out", tmp_path / "r")
    assert code == 0 and json.loads(stdout)["variant"] == "coh_no_lr"


def test_leakage_check(capsys, tmp_path):
    script = tmp_path / "leak.jsonl"
    script.write_text(json.dumps({"step_kind": "leakage", "match": "Do you know", "response": "No."}) + "\n")
    code, stdout, _ = run(capsys, "leakage-check", "--data", NIGERIA, "--out", tmp_path / "filter.txt",
                          "--backend-kind", "scripted_mock", "--backend-script", script,
                          "--calendar-start", "2014-01-01")
    assert code == 0
    assert json.loads(stdout) == {"checked": 1, "unchecked": 0, "known": 0, "known_ratio": 0.0}
    assert (tmp_path / "filter.txt").read_text() == ""


def test_leakage_check_needs_dates(capsys, tmp_path):
    code, _, err = run(capsys, "leakage-check", "--data", NIGERIA, "--out", tmp_path / "f.txt")
    assert code == 2 and "calendar" in err


def test_explain(base_run, capsys, tmp_path):
    out, _ = base_run
    script = tmp_path / "explain.jsonl"
    script.write_text(json.dumps({"step_kind": "explain", "match": "Explanation", "response": "Explanation:\n1. X: y"})
                      + "\n")
    code, stdout, _ = run(capsys, "explain", "--run", out, "--data", NIGERIA, "--query-index", 0,
                          "--backend-script", script)
    assert code == 0 and stdout.startswith("Explanation:")
    stored = json.loads((out / "records.jsonl").read_text().splitlines()[0])
    assert stored["explanation"] == "Explanation:\n1. X: y"
    code, _, err = run(capsys, "explain", "--run", out, "--data", NIGERIA, "--query-index", 99,
                       "--backend-script", script)
    assert code == 2 and "no completed trace" in err


def test_unknown_set_key(capsys, tmp_path):
    code, _, err = run(capsys, "run-coh", "--data", NIGERIA, "--out", tmp_path / "r", "--set", "beam=3")
    assert code == 2 and "unknown config key" in err


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("k = 3\nn = 5\nfirst_order_limit = 10\n")
    code, _, _ = run(capsys, "run-coh", "--data", NIGERIA, "--out", tmp_path / "r", "--config", cfg)
    assert code == 0
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert "k = 3\n" in manifest["config"]
