"""Backend equivalence: the numba kernels must match pure numpy exactly."""

import numpy as np
import pytest

from moesim import _kernels
from trace_builders import naive_topk


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba backend unavailable")
def test_topk_backends_identical():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = rng.integers(1, 40)
        e = rng.integers(2, 17)
        k = rng.integers(1, e + 1)
        scores = rng.random((n, e))
        # inject ties to exercise tie-breaking
        scores[rng.random((n, e)) < 0.3] = 0.5
        a = _kernels.topk_rows_numpy(scores, int(k))
        b = _kernels.topk_rows_numba(scores, int(k))
        np.testing.assert_array_equal(a, b)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba backend unavailable")
def test_overlap_and_counts_backends_identical():
    rng = np.random.default_rng(8)
    for _ in range(30):
        n, e, k = 17, 10, 3
        a = np.stack([rng.choice(e, size=k, replace=False) for _ in range(n)])
        b = np.stack([rng.choice(e, size=k, replace=False) for _ in range(n)])
        np.testing.assert_array_equal(
            _kernels.pair_overlap_numpy(a, b), _kernels.pair_overlap_numba(a, b)
        )
        topk = a.reshape(n, 1, k).repeat(4, axis=1)
        np.testing.assert_array_equal(
            _kernels.activation_counts_numpy(topk, e),
            _kernels.activation_counts_numba(topk, e),
        )


def test_topk_matches_naive_oracle():
    rng = np.random.default_rng(9)
    for _ in range(200):
        e = int(rng.integers(2, 12))
        k = int(rng.integers(1, e + 1))
        scores = np.round(rng.random(e), 2)  # rounded to force ties
        got = _kernels.topk_rows(scores[None, :], k)[0].tolist()
        assert got == naive_topk(scores, k)


def test_topk_tie_break_prefers_lower_index():
    scores = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert _kernels.topk_rows(scores, 2).tolist() == [[0, 1]]


def test_pair_overlap_counts_common_elements():
    a = np.array([[0, 1], [2, 3], [4, 5]])
    b = np.array([[1, 0], [3, 7], [6, 2]])
    assert _kernels.pair_overlap(a, b).tolist() == [2, 1, 0]


def test_activation_counts_accumulates():
    topk = np.array([[[0, 2], [1, 1]], [[0, 1], [3, 1]]])  # (T=2, L=2, k=2)
    counts = _kernels.activation_counts(topk, 4)
    np.testing.assert_array_equal(
        counts, np.array([[2.0, 1.0, 1.0, 0.0], [0.0, 3.0, 0.0, 1.0]])
    )


def test_backend_flag_reported():
    assert _kernels.BACKEND in ("numba", "numpy")
    if _kernels.NUMBA_DISABLED:
        assert _kernels.BACKEND == "numpy"
