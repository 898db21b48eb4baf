"""Hot numeric kernels, numba-jitted with a pure-numpy fallback.

Backend selection happens once at import time: numba is used when importable
unless the environment variable ``MOESIM_DISABLE_NUMBA`` is set to a non-empty
value other than ``0``. Only integer-exact kernels (top-k selection, set
overlap, activation counting) are dual-pathed, so the two backends return
bit-identical results and the flag changes speed, never output.

Both implementations are importable directly (``topk_rows_numpy``,
``topk_rows_numba``) for the benchmark harness and equivalence tests.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("MOESIM_DISABLE_NUMBA", "").strip()
NUMBA_DISABLED = _flag not in ("", "0")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled via MOESIM_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def topk_rows_numpy(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k expert indices, highest score first, ties to lower index.

    scores: (N, E) float array. Returns (N, k) int64.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    # stable sort of -scores keeps the lower index first among equal scores
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, :k].astype(np.int64)


def pair_overlap_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row intersection size of two index arrays with distinct entries.

    a: (N, ka), b: (N, kb) integer arrays. Returns (N,) int64.
    """
    hits = a[:, :, None] == b[:, None, :]
    return hits.any(axis=2).sum(axis=1).astype(np.int64)


def activation_counts_numpy(topk: np.ndarray, num_experts: int) -> np.ndarray:
    """Accumulate (layer, expert) selection counts from (T, L, k) top-k ids."""
    t, l, _ = topk.shape
    out = np.zeros((l, num_experts), dtype=np.float64)
    layer_idx = np.broadcast_to(np.arange(l)[None, :, None], topk.shape)
    np.add.at(out, (layer_idx, topk), 1.0)
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _topk_rows_jit(scores, k):  # pragma: no cover - exercised via wrapper
        n, e = scores.shape
        out = np.empty((n, k), dtype=np.int64)
        taken = np.zeros(e, dtype=np.bool_)
        for i in range(n):
            taken[:] = False
            for j in range(k):
                best = -1
                for c in range(e):
                    if taken[c]:
                        continue
                    if best < 0 or scores[i, c] > scores[i, best]:
                        best = c
                out[i, j] = best
                taken[best] = True
        return out

    @njit(cache=True)
    def _pair_overlap_jit(a, b):  # pragma: no cover
        n, ka = a.shape
        kb = b.shape[1]
        out = np.zeros(n, dtype=np.int64)
        for i in range(n):
            for x in range(ka):
                for y in range(kb):
                    if a[i, x] == b[i, y]:
                        out[i] += 1
                        break
        return out

    @njit(cache=True)
    def _activation_counts_jit(topk, num_experts):  # pragma: no cover
        t, l, k = topk.shape
        out = np.zeros((l, num_experts), dtype=np.float64)
        for i in range(t):
            for j in range(l):
                for c in range(k):
                    out[j, topk[i, j, c]] += 1.0
        return out

    def topk_rows_numba(scores: np.ndarray, k: int) -> np.ndarray:
        return _topk_rows_jit(np.ascontiguousarray(scores, dtype=np.float64), k)

    def pair_overlap_numba(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _pair_overlap_jit(
            np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(b, dtype=np.int64),
        )

    def activation_counts_numba(topk: np.ndarray, num_experts: int) -> np.ndarray:
        return _activation_counts_jit(
            np.ascontiguousarray(topk, dtype=np.int64), num_experts
        )

    BACKEND = "numba"
    topk_rows = topk_rows_numba
    pair_overlap = pair_overlap_numba
    activation_counts = activation_counts_numba
else:
    BACKEND = "numpy"
    topk_rows = topk_rows_numpy
    pair_overlap = pair_overlap_numpy
    activation_counts = activation_counts_numpy


def warmup() -> None:
    """Trigger JIT compilation so later calls run at steady-state speed."""
    s = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    idx = topk_rows(s, 2)
    pair_overlap(idx, idx)
    activation_counts(idx[:, None, :], 3)
