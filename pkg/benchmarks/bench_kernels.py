#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on generator-scale inputs under both backends, then an
end-to-end trace generation with the dispatcher pointed at each path. The two
paths return bit-identical results; the env flag MOESIM_DISABLE_NUMBA only
selects which one the package uses.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from moesim import _kernels
from moesim.generator import GeneratorConfig, generate_trace
from moesim.trace import MIXTRAL_SHAPE


def bench(fn, *args, repeats=20):
    fn(*args)  # warmup / JIT
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if not _kernels.HAVE_NUMBA:
        print("numba unavailable or disabled; nothing to compare")
        return

    rng = np.random.default_rng(0)
    # 512 sequences x 64 tokens x 32 layers of Mixtral-shaped gate rows
    scores = rng.random((512 * 64, 32 * 8)).reshape(-1, 8)
    topk = _kernels.topk_rows_numpy(scores, 2)
    pairs_a = topk
    pairs_b = _kernels.topk_rows_numpy(rng.random(scores.shape), 2)
    counts_in = topk.reshape(-1, 32, 2)

    rows = []
    for name, np_fn, nb_fn, fargs in (
        ("topk_rows (1.05M x 8, k=2)", _kernels.topk_rows_numpy,
         _kernels.topk_rows_numba, (scores, 2)),
        ("pair_overlap (1.05M x 2)", _kernels.pair_overlap_numpy,
         _kernels.pair_overlap_numba, (pairs_a, pairs_b)),
        ("activation_counts (32K x 32 x 2)", _kernels.activation_counts_numpy,
         _kernels.activation_counts_numba, (counts_in, 8)),
    ):
        t_np = bench(np_fn, *fargs, repeats=args.repeats)
        t_nb = bench(nb_fn, *fargs, repeats=args.repeats)
        rows.append((name, t_np, t_nb))

    def gen_once():
        generate_trace(
            GeneratorConfig(shape=MIXTRAL_SHAPE, seed=12345,
                            num_prefill_tokens=64, num_decode_tokens=64)
        )

    saved = _kernels.topk_rows
    end_to_end = []
    for label, fn in (("numpy", _kernels.topk_rows_numpy),
                      ("numba", _kernels.topk_rows_numba)):
        _kernels.topk_rows = fn
        try:
            end_to_end.append((label, bench(gen_once, repeats=max(3, args.repeats // 4))))
        finally:
            _kernels.topk_rows = saved

    width = max(len(r[0]) for r in rows) + 2
    print(f"{'kernel':<{width}}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms"
              f"{t_np / t_nb:>9.2f}x")
    print()
    print("end-to-end generate_trace (Mixtral shape, 64+64 tokens):")
    for label, t in end_to_end:
        print(f"  {label:<8} {t * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
