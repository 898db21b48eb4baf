"""Command-line interface.

Subcommands: gen-trace, simulate, sweep, compare, stats. Exit code 0 on
success; on failure a machine-readable JSON error object is printed to stderr
and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, MoesimError
from .experiment import (
    COMPARE_COLUMNS,
    ExperimentSpec,
    compare,
    load_aggregate_rows,
    pooled_decode_probabilities,
    rows_to_csv,
    run,
    run_single,
)
from .generator import GeneratorConfig, default_profile, generate_many
from .metrics import metrics_report
from .simulator import CostModel, default_cost_model
from .trace import load_trace, parse_shape, save_trace


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON path
        raise ConfigError(message)


def _add_generator_args(p):
    p.add_argument("--shape", default="mixtral", help="mixtral | phi | LxExK")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-sequences", type=int, default=1)
    p.add_argument("--prefill-tokens", type=int, default=64)
    p.add_argument("--decode-tokens", type=int, default=64)
    p.add_argument("--similarity-target", type=float, default=0.907)
    p.add_argument("--accuracy-mean", type=float, default=0.8411)
    p.add_argument("--concentration", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0)


def _generator_config(args, seed=None) -> GeneratorConfig:
    shape = parse_shape(args.shape)
    profile = default_profile(shape.num_layers, args.accuracy_mean)
    return GeneratorConfig(
        shape=shape,
        seed=args.seed if seed is None else seed,
        preference_concentration=args.concentration,
        prefill_decode_similarity_target=args.similarity_target,
        prediction_accuracy_profile=profile,
        num_prefill_tokens=args.prefill_tokens,
        num_decode_tokens=args.decode_tokens,
        routing_noise=args.noise,
        sequence_id=f"seq{args.seed if seed is None else seed}",
    )


def _load_cost_model(path) -> CostModel:
    if path is None:
        return default_cost_model()
    with open(path, "r", encoding="utf-8") as fh:
        return CostModel.from_json_obj(json.load(fh))


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _cmd_gen_trace(args) -> int:
    cfg = _generator_config(args)
    out = Path(args.out)
    os.makedirs(out, exist_ok=True)
    traces = generate_many(cfg, args.num_sequences)
    for tr in traces:
        path = out / f"{tr.sequence_id}.jsonl"
        save_trace(tr, path)
        print(path)
    return 0


def _cmd_stats(args) -> int:
    trace = load_trace(args.trace)
    report = metrics_report(trace, window=args.window)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(args.out)
    else:
        print(text)
    return 0


def _cmd_simulate(args) -> int:
    trace = load_trace(args.trace)
    calib_trace = load_trace(args.calib_trace) if args.calib_trace else trace
    calib = pooled_decode_probabilities([calib_trace])
    cost = _load_cost_model(args.cost_model)
    record = run_single(
        trace,
        calib,
        args.ecr,
        args.engine,
        cost,
        prediction_start_layer=args.start_layer,
        seed=args.seed,
    )
    out = Path(args.out)
    os.makedirs(out, exist_ok=True)
    from .experiment import _run_filename, _run_json_obj

    run_path = out / _run_filename(record)
    with open(run_path, "w", encoding="utf-8") as fh:
        json.dump(_run_json_obj(record, cost), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(run_path)
    if args.events_csv:
        events_path = out / (run_path.stem + "_events.csv")
        with open(events_path, "w", encoding="utf-8") as fh:
            fh.write(record["_decode_result"].events_csv())
        print(events_path)
    return 0


def _cmd_sweep(args) -> int:
    cost = _load_cost_model(args.cost_model)
    engines = tuple(x.strip() for x in args.engine.split(",") if x.strip())
    spec = ExperimentSpec(
        out_dir=Path(args.out),
        trace_files=tuple(args.trace or ()),
        generator=None if args.trace else _generator_config(args),
        num_sequences=args.num_sequences,
        ecr_list=_parse_float_list(args.ecr),
        engines=engines,
        cost_model=cost,
        seed=args.seed,
        calibration_fraction=args.calibration_fraction,
        prediction_start_layer=args.start_layer,
    )
    result = run(spec)
    print(result["aggregate_csv"])
    return 0


def _cmd_compare(args) -> int:
    rows = load_aggregate_rows(args.runs)
    table = compare(rows)
    text = rows_to_csv(table, COMPARE_COLUMNS)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(args.out)
    else:
        print(text, end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="moesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate synthetic routing traces")
    _add_generator_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_trace)

    p = sub.add_parser("stats", help="trace statistics as JSON")
    p.add_argument("--trace", required=True)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("simulate", help="simulate one trace/ECR/engine cell")
    p.add_argument("--trace", required=True)
    p.add_argument("--calib-trace", help="trace whose decode phase calibrates "
                   "the cache (defaults to the simulated trace)")
    p.add_argument("--ecr", type=float, required=True)
    p.add_argument("--engine", required=True,
                   choices=("ondemand", "prefetch", "fiddler", "daop"))
    p.add_argument("--cost-model", help="JSON file of cost model overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-layer", type=int, default=4)
    p.add_argument("--events-csv", action="store_true",
                   help="also write the decode event log as CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="run a (trace x ECR x engine) grid")
    _add_generator_args(p)
    p.add_argument("--trace", action="append",
                   help="trace file (repeatable); omit to generate")
    p.add_argument("--ecr", required=True, help="comma-separated ECR list")
    p.add_argument("--engine", default="ondemand,prefetch,fiddler,daop",
                   help="comma-separated engine list")
    p.add_argument("--cost-model")
    p.add_argument("--calibration-fraction", type=float, default=0.2)
    p.add_argument("--start-layer", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare", help="engine speedup table from aggregates")
    p.add_argument("--runs", nargs="+", required=True,
                   help="aggregate CSV files from sweep runs")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except MoesimError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    except OSError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
