"""CLI: subcommand plumbing, exit codes, machine-readable errors."""

import json
import subprocess
import sys

import pytest

from moesim.cli import main


def run_cli(args):
    return main(list(args))


def test_gen_trace_stats_roundtrip(tmp_path, capsys):
    out = tmp_path / "traces"
    rc = run_cli([
        "gen-trace", "--shape", "4x6x2", "--seed", "5", "--out", str(out),
        "--prefill-tokens", "8", "--decode-tokens", "32",
        "--similarity-target", "0.85", "--accuracy-mean", "0.8",
    ])
    assert rc == 0
    trace_path = out / "seq5-0000.jsonl"
    assert trace_path.exists()
    capsys.readouterr()

    rc = run_cli(["stats", "--trace", str(trace_path), "--window", "8"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 < report["similarity"] <= 1.0
    assert report["mean_prediction_accuracy"] == pytest.approx(0.8, abs=0.1)
    assert len(report["window_drift"]) == 3


def test_simulate_writes_run_json_and_events(tmp_path, capsys):
    traces = tmp_path / "traces"
    run_cli([
        "gen-trace", "--shape", "4x6x2", "--seed", "7", "--out", str(traces),
        "--prefill-tokens", "6", "--decode-tokens", "8",
        "--similarity-target", "0.85",
    ])
    capsys.readouterr()
    out = tmp_path / "sim"
    rc = run_cli([
        "simulate", "--trace", str(traces / "seq7-0000.jsonl"),
        "--ecr", "0.5", "--engine", "daop", "--out", str(out), "--events-csv",
    ])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    run_path, events_path = lines
    obj = json.loads((out / run_path.split("/")[-1]).read_text())
    assert obj["engine"] == "daop"
    assert obj["decode"]["tokens_per_second"] > 0
    events = (out / events_path.split("/")[-1]).read_text().splitlines()
    assert events[0] == "resource,layer,expert,start_ms,end_ms,label"


def test_sweep_and_compare(tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = run_cli([
        "sweep", "--shape", "4x6x2", "--seed", "9", "--num-sequences", "5",
        "--prefill-tokens", "6", "--decode-tokens", "8",
        "--similarity-target", "0.85",
        "--ecr", "0.5,1.0", "--engine", "ondemand,fiddler,daop",
        "--out", str(out),
    ])
    assert rc == 0
    agg = out / "aggregate.csv"
    assert agg.exists()
    capsys.readouterr()

    cmp_path = tmp_path / "cmp.csv"
    rc = run_cli(["compare", "--runs", str(agg), "--out", str(cmp_path)])
    assert rc == 0
    lines = cmp_path.read_text().splitlines()
    assert lines[0].startswith("schema_version,ecr,engine_a,engine_b")
    assert len(lines) > 1


def test_error_is_machine_readable_json(tmp_path, capsys):
    rc = run_cli(["stats", "--trace", str(tmp_path / "missing.jsonl")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "message" in err


def test_usage_error_is_json(capsys):
    rc = run_cli(["simulate", "--trace", "x"])  # missing required flags
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_bad_engine_rejected(tmp_path, capsys):
    rc = run_cli([
        "simulate", "--trace", "x", "--ecr", "0.5", "--engine", "bogus",
        "--out", str(tmp_path),
    ])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_cost_model_file_override(tmp_path, capsys):
    traces = tmp_path / "traces"
    run_cli([
        "gen-trace", "--shape", "4x6x2", "--seed", "3", "--out", str(traces),
        "--prefill-tokens", "6", "--decode-tokens", "6",
        "--similarity-target", "0.85",
    ])
    capsys.readouterr()
    cm = tmp_path / "cost.json"
    cm.write_text(json.dumps({"t_migrate_expert": 0.0}))
    out = tmp_path / "sim"
    rc = run_cli([
        "simulate", "--trace", str(traces / "seq3-0000.jsonl"),
        "--ecr", "0.5", "--engine", "ondemand",
        "--cost-model", str(cm), "--out", str(out),
    ])
    assert rc == 0
    run_path = capsys.readouterr().out.strip()
    obj = json.loads((out / run_path.split("/")[-1]).read_text())
    assert obj["cost_model"]["t_migrate_expert"] == 0.0


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "moesim.cli", "gen-trace", "--shape", "2x4x2",
         "--seed", "1", "--out", str(tmp_path), "--prefill-tokens", "4",
         "--decode-tokens", "4", "--similarity-target", "0.8"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "seq1-0000.jsonl").exists()
