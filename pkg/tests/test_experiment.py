"""Experiment runner: determinism, full-cache equality, compare algebra."""

import json

import pytest

from moesim import (
    ConfigError,
    ExperimentSpec,
    GeneratorConfig,
    ModelShape,
    compare,
    run,
)
from moesim.experiment import load_aggregate_rows

SHAPE = ModelShape(6, 6, 2)


def small_spec(out_dir, **kw):
    gen = GeneratorConfig(
        shape=SHAPE,
        seed=0,
        prediction_accuracy_profile=(1.0,) * 6,
        prefill_decode_similarity_target=0.85,
        num_prefill_tokens=6,
        num_decode_tokens=8,
    )
    args = dict(
        out_dir=out_dir,
        generator=gen,
        num_sequences=5,
        ecr_list=(0.5,),
        engines=("ondemand", "fiddler", "daop"),
        seed=11,
    )
    args.update(kw)
    return ExperimentSpec(**args)


def test_full_cache_equalizes_engines(tmp_path):
    spec = small_spec(tmp_path / "full", ecr_list=(1.0,))
    result = run(spec)
    by_engine = {}
    for row in result["rows"]:
        by_engine.setdefault(row["engine"], []).append(row["tokens_per_second"])
    reference = by_engine.pop("fiddler")
    for engine, tps in by_engine.items():
        assert tps == pytest.approx(reference, rel=1e-12), engine


def test_rows_cover_grid(tmp_path):
    spec = small_spec(tmp_path / "grid", ecr_list=(0.4, 0.6))
    result = run(spec)
    # 5 sequences, 1 for calibration, 4 evaluated
    assert len(result["rows"]) == 2 * 3 * 4
    assert (tmp_path / "grid" / "aggregate.csv").exists()
    assert len(list((tmp_path / "grid" / "runs").glob("*.json"))) == 24


def test_determinism_byte_identical_reports(tmp_path):
    a = run(small_spec(tmp_path / "a"))
    b = run(small_spec(tmp_path / "b"))
    csv_a = (tmp_path / "a" / "aggregate.csv").read_bytes()
    csv_b = (tmp_path / "b" / "aggregate.csv").read_bytes()
    assert csv_a == csv_b
    for run_a in sorted((tmp_path / "a" / "runs").glob("*.json")):
        run_b = tmp_path / "b" / "runs" / run_a.name
        assert run_a.read_bytes() == run_b.read_bytes()


def test_run_json_is_reproducible_record(tmp_path):
    result = run(small_spec(tmp_path / "r"))
    path = next(iter(sorted((tmp_path / "r" / "runs").glob("*.json"))))
    obj = json.loads(path.read_text())
    assert {"trace_id", "ecr", "engine", "cost_model", "decode", "prefill",
            "placement_initial"} <= set(obj)
    row = next(
        r for r in result["rows"]
        if r["trace_id"] == obj["trace_id"] and r["engine"] == obj["engine"]
    )
    tps = obj["decode"]["tokens_per_second"]
    assert tps == pytest.approx(row["tokens_per_second"], rel=1e-12)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(out_dir="x")  # no trace source
    gen = GeneratorConfig(shape=SHAPE, seed=0)
    with pytest.raises(ConfigError):
        ExperimentSpec(out_dir="x", generator=gen, engines=())
    with pytest.raises(ConfigError):
        ExperimentSpec(out_dir="x", generator=gen, engines=("warp",))
    with pytest.raises(ConfigError):
        ExperimentSpec(out_dir="x", generator=gen, ecr_list=(0.0,))
    with pytest.raises(ConfigError):
        ExperimentSpec(out_dir="x", generator=gen, ecr_list=(1.5,))


def test_too_few_sequences_for_split(tmp_path):
    with pytest.raises(ConfigError):
        run(small_spec(tmp_path / "few", num_sequences=1))


def test_compare_identity_and_antisymmetry(tmp_path):
    result = run(small_spec(tmp_path / "c"))
    rows = load_aggregate_rows([tmp_path / "c" / "aggregate.csv"])
    table = compare(rows)
    pairs = {
        (r["engine_a"], r["engine_b"]): r["speedup_a_over_b"] for r in table
    }
    for (a, b), ratio in pairs.items():
        assert ratio == pytest.approx(1.0 / pairs[(b, a)], rel=1e-12)
    # comparing a run set against itself gives ratio 1 for same-engine pairs
    doubled = rows + rows
    table2 = compare(doubled)
    assert len(table2) == len(table)


def test_compare_dominance_ordering(tmp_path):
    result = run(small_spec(tmp_path / "d", ecr_list=(0.469,)))
    table = compare(result["rows"])
    ratios = {
        (r["engine_a"], r["engine_b"]): r["speedup_a_over_b"] for r in table
    }
    assert ratios[("daop", "fiddler")] >= 1.0
    assert ratios[("ondemand", "daop")] < 1.0


def test_compare_mismatched_trace_sets(tmp_path):
    result = run(small_spec(tmp_path / "m"))
    rows = result["rows"]
    broken = [dict(r) for r in rows]
    # drop one trace from one engine group only
    victim = broken[0]["trace_id"]
    broken = [
        r for r in broken
        if not (r["engine"] == "fiddler" and r["trace_id"] == victim)
    ]
    with pytest.raises(ConfigError):
        compare(broken)


def test_compare_needs_two_engines(tmp_path):
    result = run(small_spec(tmp_path / "one", engines=("fiddler",)))
    with pytest.raises(ConfigError):
        compare(result["rows"])


def test_trace_files_source(tmp_path):
    from moesim import generate_many, save_trace

    gen = GeneratorConfig(
        shape=SHAPE, seed=3,
        prediction_accuracy_profile=(1.0,) * 6,
        prefill_decode_similarity_target=0.85,
        num_prefill_tokens=6, num_decode_tokens=8,
    )
    paths = []
    for tr in generate_many(gen, 4):
        p = tmp_path / f"{tr.sequence_id}.jsonl"
        save_trace(tr, p)
        paths.append(p)
    spec = ExperimentSpec(
        out_dir=tmp_path / "files",
        trace_files=tuple(paths),
        ecr_list=(0.5,),
        engines=("fiddler",),
        seed=3,
    )
    result = run(spec)
    assert len(result["rows"]) == 3  # 4 traces, 1 calibrates
