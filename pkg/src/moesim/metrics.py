"""Measurement quantities over traces and executions.

Covers the per-phase activation matrices, their mean row-cosine similarity,
layer-wise one-ahead prediction accuracy, sliding-window activation drift, and
the routing fidelity of a simulated execution relative to the true gates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import (
    EmptyPhaseError,
    PredictionMissingError,
    ShapeMismatchError,
    TooShortSequenceError,
)
from .trace import RoutingTrace


@dataclass(frozen=True)
class ActivationMatrix:
    """L x E matrix of expert activation probabilities for one phase.

    Entry (i, j) is the fraction of the phase's tokens whose true top-k at
    layer i contains expert j, so every row sums to k.
    """

    values: np.ndarray
    phase: str
    token_count: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatchError("activation matrix must be 2-D")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ShapeMismatchError("activation matrix entries must be >= 0")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def num_experts(self) -> int:
        return self.values.shape[1]


def _phase_topk(trace: RoutingTrace, phase: str) -> np.ndarray:
    true = getattr(trace, f"{phase}_true")
    s = trace.shape
    flat = true.reshape(-1, s.num_experts)
    return _kernels.topk_rows(flat, s.top_k).reshape(
        true.shape[0], s.num_layers, s.top_k
    )


def expert_counts(trace: RoutingTrace, phase: str) -> np.ndarray:
    """(L, E) integer token counts per expert from the phase's true top-k."""
    true = getattr(trace, f"{phase}_true")
    if true.shape[0] == 0:
        raise EmptyPhaseError(f"trace has no {phase} tokens")
    topk = _phase_topk(trace, phase)
    counts = _kernels.activation_counts(topk, trace.shape.num_experts)
    return counts.astype(np.int64)


def activation_matrix(trace: RoutingTrace, phase: str) -> ActivationMatrix:
    """Activation probabilities for a phase; raises on an empty phase."""
    true = getattr(trace, f"{phase}_true")
    n = true.shape[0]
    if n == 0:
        raise EmptyPhaseError(f"trace has no {phase} tokens")
    topk = _phase_topk(trace, phase)
    counts = _kernels.activation_counts(topk, trace.shape.num_experts)
    return ActivationMatrix(counts / n, phase, n)


def _as_matrix(m) -> np.ndarray:
    if isinstance(m, ActivationMatrix):
        return m.values
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError("similarity expects 2-D matrices")
    return arr


def row_cosines(p, d) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer cosine similarity plus a mask of degenerate (zero) rows.

    A row pair where either side is the zero vector contributes cosine 0 and
    is flagged degenerate instead of raising.
    """
    pv, dv = _as_matrix(p), _as_matrix(d)
    if pv.shape != dv.shape:
        raise ShapeMismatchError(
            f"matrix dimensions differ: {pv.shape} vs {dv.shape}"
        )
    num = (pv * dv).sum(axis=1)
    np_norm = np.linalg.norm(pv, axis=1)
    nd_norm = np.linalg.norm(dv, axis=1)
    degenerate = (np_norm == 0.0) | (nd_norm == 0.0)
    den = np.where(degenerate, 1.0, np_norm * nd_norm)
    cows = np.where(degenerate, 0.0, num / den)
    return cows, degenerate


def similarity(p, d) -> float:
    """Mean over layers of the row-wise cosine between two L x E matrices."""
    cows, _ = row_cosines(p, d)
    return float(cows.mean())


def prediction_accuracy(trace: RoutingTrace) -> np.ndarray:
    """Per-layer mean top-k overlap between predicted and true decode gates.

    Entry l scores the predictions *for* layer l (carried on layer l-1's
    records). Layers with no prediction (always layer 0) are NaN, not zero.
    """
    s = trace.shape
    n = trace.num_decode_tokens
    if n == 0:
        raise EmptyPhaseError("trace has no decode tokens")
    out = np.full(s.num_layers, np.nan)
    true_top = _phase_topk(trace, "decode")
    for layer in range(1, s.num_layers):
        if not np.all(trace.decode_mask[:, layer - 1]):
            t = int(np.argwhere(~trace.decode_mask[:, layer - 1])[0][0])
            raise PredictionMissingError(
                f"decode token {t} lacks a prediction for layer {layer}"
            )
        pred_top = _kernels.topk_rows(
            trace.decode_predicted[:, layer - 1, :], s.top_k
        )
        overlap = _kernels.pair_overlap(pred_top, true_top[:, layer, :])
        out[layer] = overlap.mean() / s.top_k
    return out


def mean_prediction_accuracy(trace: RoutingTrace) -> float:
    acc = prediction_accuracy(trace)
    vals = acc[~np.isnan(acc)]
    if vals.size == 0:
        return float("nan")
    return float(vals.mean())


def window_drift(trace: RoutingTrace, window: int = 15) -> list[float]:
    """Similarity between adjacent non-overlapping decode windows.

    Values near 1 mean stationary routing; dips mark intra-sequence drift.
    """
    if window < 1:
        raise ShapeMismatchError("window must be >= 1")
    n = trace.num_decode_tokens
    if n < 2 * window:
        raise TooShortSequenceError(
            f"decode has {n} tokens; window analysis needs >= {2 * window}"
        )
    s = trace.shape
    topk = _phase_topk(trace, "decode")
    num_windows = n // window
    mats = []
    for w in range(num_windows):
        chunk = topk[w * window : (w + 1) * window]
        counts = _kernels.activation_counts(chunk, s.num_experts)
        mats.append(counts / window)
    return [similarity(mats[i], mats[i + 1]) for i in range(num_windows - 1)]


def routing_fidelity(
    trace: RoutingTrace,
    executed: Sequence[Sequence[Sequence[int]]],
) -> tuple[float, float]:
    """How faithfully an execution matched the true gates.

    executed: per decode token, per layer, the k expert indices that actually
    ran. Returns (set_fidelity, score_mass): mean top-k overlap fraction and
    mean captured gate-probability mass relative to the true top-k.
    """
    s = trace.shape
    n = trace.num_decode_tokens
    if len(executed) != n:
        raise ShapeMismatchError(
            f"executed covers {len(executed)} tokens, trace has {n}"
        )
    true_top = _phase_topk(trace, "decode")
    overlaps = []
    masses = []
    for t in range(n):
        if len(executed[t]) != s.num_layers:
            raise ShapeMismatchError(
                f"token {t}: executed covers {len(executed[t])} layers, "
                f"expected {s.num_layers}"
            )
        for l in range(s.num_layers):
            ex = tuple(executed[t][l])
            if len(ex) != s.top_k or len(set(ex)) != s.top_k:
                raise ShapeMismatchError(
                    f"token {t} layer {l}: executed set must hold {s.top_k} "
                    f"distinct experts, got {ex}"
                )
            tt = set(int(x) for x in true_top[t, l])
            overlaps.append(len(tt.intersection(ex)) / s.top_k)
            scores = trace.decode_true[t, l]
            true_mass = float(scores[true_top[t, l]].sum())
            got_mass = float(scores[list(ex)].sum())
            masses.append(got_mass / true_mass)
    return float(np.mean(overlaps)), float(np.mean(masses))


def metrics_report(trace: RoutingTrace, executed=None, window: int = 15) -> dict:
    """Flat JSON-ready metrics object for the CLI reporter."""
    report: dict = {
        "sequence_id": trace.sequence_id,
        "num_prefill_tokens": trace.num_prefill_tokens,
        "num_decode_tokens": trace.num_decode_tokens,
    }
    if trace.num_decode_tokens:
        p = activation_matrix(trace, "prefill")
        d = activation_matrix(trace, "decode")
        report["similarity"] = similarity(p, d)
        acc = prediction_accuracy(trace)
        report["prediction_accuracy"] = [
            None if np.isnan(a) else float(a) for a in acc
        ]
        report["mean_prediction_accuracy"] = (
            None if np.isnan(np.nanmean(acc)) else float(np.nanmean(acc))
        )
        if trace.num_decode_tokens >= 2 * window:
            report["window_drift"] = window_drift(trace, window)
        else:
            report["window_drift"] = None
    else:
        report["similarity"] = None
        report["prediction_accuracy"] = None
        report["mean_prediction_accuracy"] = None
        report["window_drift"] = None
    if executed is not None:
        set_f, mass = routing_fidelity(trace, executed)
        report["set_fidelity"] = set_f
        report["score_mass"] = mass
    else:
        report["set_fidelity"] = None
        report["score_mass"] = None
    return report
