"""Experiment runner: (trace, ECR, engine) grid to report files.

A run calibrates the initial cache on a leading fraction of the sequences,
evaluates on the rest, simulates prefill (with per-sequence reallocation for
the predictive engine) and decode, computes metrics, and writes one JSON per
run plus an aggregate CSV. Everything is deterministic given the seed; report
files are byte-stable across repeat runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .generator import GeneratorConfig, generate_many
from .metrics import (
    activation_matrix,
    expert_counts,
    routing_fidelity,
    similarity,
)
from .placement import allocate_for_sequence, init_from_calibration
from .policies import ENGINES, PolicyConfig
from .simulator import CostModel, default_cost_model, simulate_decode, simulate_prefill
from .trace import RoutingTrace, load_trace

CSV_SCHEMA_VERSION = 1

AGGREGATE_COLUMNS = (
    "schema_version",
    "trace_id",
    "ecr",
    "engine",
    "seed",
    "num_prefill_tokens",
    "num_decode_tokens",
    "tokens_per_second",
    "mean_token_latency_ms",
    "total_latency_ms",
    "migrations",
    "prefetches",
    "wasted_prefetches",
    "slow_executions",
    "degradations",
    "stale_inputs",
    "set_fidelity",
    "score_mass",
    "prefill_latency_ms",
    "prefill_hidden_migration_ms",
    "swap_count",
    "similarity_prefill_decode",
)

COMPARE_COLUMNS = (
    "schema_version",
    "ecr",
    "engine_a",
    "engine_b",
    "tokens_per_second_a",
    "tokens_per_second_b",
    "speedup_a_over_b",
    "migrations_a",
    "migrations_b",
    "set_fidelity_a",
    "set_fidelity_b",
)


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: trace source, sweep axes, cost model, output dir."""

    out_dir: Path
    trace_files: tuple = ()
    generator: GeneratorConfig | None = None
    num_sequences: int = 8
    ecr_list: tuple[float, ...] = (0.469,)
    engines: tuple[str, ...] = ENGINES
    cost_model: CostModel = field(default_factory=default_cost_model)
    seed: int = 0
    calibration_fraction: float = 0.2
    prediction_start_layer: int = 4
    graceful_degradation: bool = True

    def __post_init__(self):
        if not self.trace_files and self.generator is None:
            raise ConfigError("spec needs trace files or a generator config")
        if not self.engines:
            raise ConfigError("spec needs at least one engine")
        for eng in self.engines:
            if eng not in ENGINES:
                raise ConfigError(f"unknown engine {eng!r}")
        for ecr in self.ecr_list:
            if not 0.0 < ecr <= 1.0:
                raise ConfigError(f"ecr values must be in (0, 1], got {ecr}")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ConfigError("calibration_fraction must be in (0, 1)")


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _materialize_traces(spec: ExperimentSpec) -> list[RoutingTrace]:
    if spec.trace_files:
        return [load_trace(p) for p in spec.trace_files]
    gen = spec.generator
    base = GeneratorConfig(
        shape=gen.shape,
        seed=spec.seed,
        preference_concentration=gen.preference_concentration,
        prefill_decode_similarity_target=gen.prefill_decode_similarity_target,
        prediction_accuracy_profile=gen.prediction_accuracy_profile,
        num_prefill_tokens=gen.num_prefill_tokens,
        num_decode_tokens=gen.num_decode_tokens,
        routing_noise=gen.routing_noise,
        sequence_id=f"seq{spec.seed}",
    )
    return generate_many(base, spec.num_sequences)


def pooled_decode_probabilities(traces) -> np.ndarray:
    """Token-pooled decode activation probabilities over several traces."""
    total = None
    tokens = 0
    for tr in traces:
        counts = expert_counts(tr, "decode")
        total = counts if total is None else total + counts
        tokens += tr.num_decode_tokens
    if tokens == 0:
        raise ConfigError("calibration traces contain no decode tokens")
    return total / tokens


def run_single(
    trace: RoutingTrace,
    calib_matrix: np.ndarray,
    ecr: float,
    engine: str,
    cost: CostModel,
    prediction_start_layer: int = 4,
    graceful_degradation: bool = True,
    seed: int = 0,
) -> dict:
    """Simulate one (trace, ecr, engine) cell; returns the flat run record."""
    shape = trace.shape
    placement0 = init_from_calibration(calib_matrix, ecr, shape)
    if engine == "daop":
        placement, swaps = allocate_for_sequence(
            placement0, expert_counts(trace, "prefill")
        )
    else:
        placement, swaps = placement0, []
    prefill_res = simulate_prefill(trace, placement0, swaps, cost)
    config = PolicyConfig(
        engine=engine,
        prediction_start_layer=prediction_start_layer,
        graceful_degradation=graceful_degradation,
    )
    decode_res = simulate_decode(trace, placement, config, cost)
    if trace.num_decode_tokens:
        set_f, mass = routing_fidelity(trace, decode_res.executed)
        sim = similarity(
            activation_matrix(trace, "prefill"), activation_matrix(trace, "decode")
        )
    else:
        set_f = mass = sim = float("nan")
    record = {
        "schema_version": CSV_SCHEMA_VERSION,
        "trace_id": trace.sequence_id,
        "ecr": ecr,
        "engine": engine,
        "seed": seed,
        "num_prefill_tokens": trace.num_prefill_tokens,
        "num_decode_tokens": trace.num_decode_tokens,
        "tokens_per_second": decode_res.tokens_per_second,
        "mean_token_latency_ms": (
            float(np.mean(decode_res.per_token_latency_ms))
            if decode_res.per_token_latency_ms
            else float("nan")
        ),
        "total_latency_ms": float(sum(decode_res.per_token_latency_ms)),
        "migrations": decode_res.counts["migrations"],
        "prefetches": decode_res.counts["prefetches"],
        "wasted_prefetches": decode_res.counts["wasted_prefetches"],
        "slow_executions": decode_res.counts["slow_executions"],
        "degradations": decode_res.counts["degradations"],
        "stale_inputs": decode_res.counts["stale_inputs"],
        "set_fidelity": set_f,
        "score_mass": mass,
        "prefill_latency_ms": prefill_res.per_token_latency_ms[0],
        "prefill_hidden_migration_ms": prefill_res.migration_hidden_ms,
        "swap_count": len(swaps),
        "similarity_prefill_decode": sim,
        "_decode_result": decode_res,
        "_prefill_result": prefill_res,
        "_placement_initial": placement0,
        "_placement_final": placement,
        "_swaps": swaps,
    }
    return record


def _run_json_obj(record: dict, cost: CostModel) -> dict:
    decode_res = record["_decode_result"]
    prefill_res = record["_prefill_result"]
    obj = {
        "schema_version": CSV_SCHEMA_VERSION,
        "trace_id": record["trace_id"],
        "ecr": record["ecr"],
        "engine": record["engine"],
        "seed": record["seed"],
        "cost_model": cost.to_json_obj(),
        "decode": decode_res.summary_json_obj(),
        "prefill": prefill_res.summary_json_obj(),
        "metrics": {
            "set_fidelity": _json_num(record["set_fidelity"]),
            "score_mass": _json_num(record["score_mass"]),
            "similarity_prefill_decode": _json_num(
                record["similarity_prefill_decode"]
            ),
        },
        "placement_initial": record["_placement_initial"].to_json_obj(),
        "placement_final": record["_placement_final"].to_json_obj(),
        "swaps": [
            {
                "layer": s.layer,
                "swapped_in": s.swapped_in,
                "swapped_out": s.swapped_out,
                "hot_tokens": s.hot_tokens,
                "cold_tokens": s.cold_tokens,
            }
            for s in record["_swaps"]
        ],
    }
    return obj


def _json_num(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _run_filename(record: dict) -> str:
    ecr = format(record["ecr"], ".6g").replace(".", "p")
    return f"run_{record['trace_id']}_{ecr}_{record['engine']}.json"


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def run(spec: ExperimentSpec) -> dict:
    """Execute the experiment grid; returns paths and the aggregate rows."""
    traces = _materialize_traces(spec)
    shapes = {t.shape for t in traces}
    if len(shapes) > 1:
        raise ConfigError(f"traces disagree on model shape: {shapes}")
    n_calib = max(1, int(len(traces) * spec.calibration_fraction))
    if n_calib >= len(traces):
        raise ConfigError(
            f"{len(traces)} sequences leave no evaluation split after "
            f"{n_calib} calibration sequences"
        )
    calib, evaluation = traces[:n_calib], traces[n_calib:]
    calib_matrix = pooled_decode_probabilities(calib)

    out_dir = Path(spec.out_dir)
    runs_dir = out_dir / "runs"
    os.makedirs(runs_dir, exist_ok=True)

    rows = []
    for ecr in spec.ecr_list:
        for engine in spec.engines:
            for tr in evaluation:
                record = run_single(
                    tr,
                    calib_matrix,
                    ecr,
                    engine,
                    spec.cost_model,
                    spec.prediction_start_layer,
                    spec.graceful_degradation,
                    spec.seed,
                )
                run_path = runs_dir / _run_filename(record)
                with open(run_path, "w", encoding="utf-8") as fh:
                    json.dump(
                        _run_json_obj(record, spec.cost_model),
                        fh,
                        indent=2,
                        sort_keys=True,
                    )
                    fh.write("\n")
                rows.append({c: record[c] for c in AGGREGATE_COLUMNS})

    rows.sort(key=lambda r: (r["ecr"], r["engine"], r["trace_id"]))
    agg_path = out_dir / "aggregate.csv"
    with open(agg_path, "w", encoding="utf-8") as fh:
        fh.write(rows_to_csv(rows, AGGREGATE_COLUMNS))
    return {"aggregate_csv": agg_path, "rows": rows, "runs_dir": runs_dir}


def load_aggregate_rows(paths) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(AGGREGATE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ConfigError(
                    f"{path}: aggregate CSV missing columns {sorted(missing)}"
                )
            rows.extend(reader)
    return rows


def compare(rows) -> list[dict]:
    """Per-ECR engine-vs-engine speedups from aggregate rows.

    Requires every (ecr, engine) group to cover the same trace set; means are
    taken over traces. Ratios are emitted for every ordered engine pair.
    """
    groups: dict[tuple[str, str], dict[str, dict]] = {}
    for row in rows:
        key = (str(row["ecr"]), str(row["engine"]))
        groups.setdefault(key, {})[str(row["trace_id"])] = row
    if len({ecr for ecr, _ in groups}) == 0 or len({e for _, e in groups}) < 2:
        raise ConfigError("compare needs runs for at least two engines")
    trace_sets = {key: frozenset(v) for key, v in groups.items()}
    reference = next(iter(trace_sets.values()))
    for key, ts in trace_sets.items():
        if ts != reference:
            raise ConfigError(
                f"mismatched trace sets: group {key} covers {sorted(ts)}, "
                f"expected {sorted(reference)}"
            )

    def mean_of(key, column):
        return float(
            np.mean([float(groups[key][t][column]) for t in sorted(reference)])
        )

    ecrs = sorted({ecr for ecr, _ in groups}, key=float)
    engines = sorted({e for _, e in groups})
    out = []
    for ecr in ecrs:
        for a in engines:
            for b in engines:
                if a == b or (ecr, a) not in groups or (ecr, b) not in groups:
                    continue
                tps_a = mean_of((ecr, a), "tokens_per_second")
                tps_b = mean_of((ecr, b), "tokens_per_second")
                out.append(
                    {
                        "schema_version": CSV_SCHEMA_VERSION,
                        "ecr": float(ecr),
                        "engine_a": a,
                        "engine_b": b,
                        "tokens_per_second_a": tps_a,
                        "tokens_per_second_b": tps_b,
                        "speedup_a_over_b": tps_a / tps_b,
                        "migrations_a": mean_of((ecr, a), "migrations"),
                        "migrations_b": mean_of((ecr, b), "migrations"),
                        "set_fidelity_a": mean_of((ecr, a), "set_fidelity"),
                        "set_fidelity_b": mean_of((ecr, b), "set_fidelity"),
                    }
                )
    return out
