"""Routing traces: model shape, per-token gate scores, and the on-disk format.

A trace captures, for one input sequence, the gate probability vector of every
(token, layer) pair in both inference phases, plus the one-layer-ahead
predicted probabilities where they exist. Traces are purely routing data:
no tokenizer, no text, no weights.

On-disk format (JSON Lines):
  line 1   header  {"format_version": 1, "sequence_id": ..., "L": ..., "E": ...,
                    "k": ..., "num_prefill_tokens": ..., "num_decode_tokens": ...}
  line 2+  token   {"phase": "prefill"|"decode", "token_index": i,
                    "layers": [{"true_scores": [...],
                                "predicted_scores": [...] | null}, ...]}

Tokens appear in order: all prefill tokens, then all decode tokens. Scores are
serialized with 17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NormalizationError, ShapeMismatchError, TraceParseError

SCORE_SUM_TOL = 1e-6

PHASES = ("prefill", "decode")


@dataclass(frozen=True)
class ModelShape:
    """Structural parameters of the MoE model: layers, experts, top-k."""

    num_layers: int
    num_experts: int
    top_k: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ShapeMismatchError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 2:
            raise ShapeMismatchError(
                f"num_experts must be >= 2, got {self.num_experts}"
            )
        if not 1 <= self.top_k <= self.num_experts:
            raise ShapeMismatchError(
                f"top_k must be in [1, {self.num_experts}], got {self.top_k}"
            )


# Preset shapes for the two reference model families (32 blocks, top-2).
MIXTRAL_SHAPE = ModelShape(num_layers=32, num_experts=8, top_k=2)
PHI_SHAPE = ModelShape(num_layers=32, num_experts=16, top_k=2)

_PRESETS = {"mixtral": MIXTRAL_SHAPE, "phi": PHI_SHAPE}


def parse_shape(text: str) -> ModelShape:
    """Parse a shape spec: a preset name ('mixtral', 'phi') or 'LxExK'."""
    key = text.strip().lower()
    if key in _PRESETS:
        return _PRESETS[key]
    parts = key.split("x")
    if len(parts) != 3:
        raise ShapeMismatchError(
            f"shape must be 'mixtral', 'phi' or 'LxExK', got {text!r}"
        )
    try:
        l, e, k = (int(p) for p in parts)
    except ValueError:
        raise ShapeMismatchError(f"non-integer component in shape {text!r}") from None
    return ModelShape(l, e, k)


@dataclass(frozen=True)
class TokenRouting:
    """Gate scores of one (token, layer): true, plus optional predicted.

    predicted_scores hold the gate probabilities forecast for the *next*
    layer of the same token; they are None on the last layer (no next layer)
    and usually on prefill tokens.
    """

    true_scores: np.ndarray
    predicted_scores: np.ndarray | None = None

    def __post_init__(self):
        _check_scores(self.true_scores, "true_scores")
        if self.predicted_scores is not None:
            _check_scores(self.predicted_scores, "predicted_scores")
            if self.predicted_scores.shape != self.true_scores.shape:
                raise ShapeMismatchError(
                    "predicted_scores length differs from true_scores"
                )

    def __eq__(self, other):
        if not isinstance(other, TokenRouting):
            return NotImplemented
        if not np.array_equal(self.true_scores, other.true_scores):
            return False
        if (self.predicted_scores is None) != (other.predicted_scores is None):
            return False
        if self.predicted_scores is None:
            return True
        return np.array_equal(self.predicted_scores, other.predicted_scores)


def _check_scores(vec: np.ndarray, name: str) -> None:
    if vec.ndim != 1:
        raise ShapeMismatchError(f"{name} must be a 1-D vector")
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise NormalizationError(f"{name} has negative or non-finite entries")
    s = float(vec.sum())
    if abs(s - 1.0) > SCORE_SUM_TOL:
        raise NormalizationError(f"{name} sums to {s!r}, expected 1 within 1e-6")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class RoutingTrace:
    """One sequence's routing data for both phases.

    Internally stored as dense arrays:
      {phase}_true        (T, L, E) float64
      {phase}_predicted   (T, L, E) float64, zero rows where absent
      {phase}_mask        (T, L)    bool, True where a prediction exists

    Instances are immutable after construction (arrays are read-only views).
    """

    def __init__(
        self,
        shape: ModelShape,
        sequence_id: str,
        prefill_true: np.ndarray,
        decode_true: np.ndarray,
        prefill_predicted: np.ndarray | None = None,
        prefill_mask: np.ndarray | None = None,
        decode_predicted: np.ndarray | None = None,
        decode_mask: np.ndarray | None = None,
    ):
        self.shape = shape
        self.sequence_id = str(sequence_id)
        l, e = shape.num_layers, shape.num_experts

        prefill_true = np.asarray(prefill_true, dtype=np.float64)
        decode_true = np.asarray(decode_true, dtype=np.float64)
        if prefill_true.ndim != 3 or prefill_true.shape[1:] != (l, e):
            raise ShapeMismatchError(
                f"prefill_true must be (T, {l}, {e}), got {prefill_true.shape}"
            )
        if prefill_true.shape[0] < 1:
            raise ShapeMismatchError("prefill phase must contain at least one token")
        if decode_true.ndim != 3 or decode_true.shape[1:] != (l, e):
            raise ShapeMismatchError(
                f"decode_true must be (T, {l}, {e}), got {decode_true.shape}"
            )

        def _prep(pred, mask, n, phase):
            if pred is None:
                pred = np.zeros((n, l, e))
            if mask is None:
                mask = np.zeros((n, l), dtype=bool)
            pred = np.asarray(pred, dtype=np.float64)
            mask = np.asarray(mask, dtype=bool)
            if pred.shape != (n, l, e):
                raise ShapeMismatchError(f"{phase} predicted array has wrong shape")
            if mask.shape != (n, l):
                raise ShapeMismatchError(f"{phase} prediction mask has wrong shape")
            # canonicalize: no stale values where the mask says "absent"
            pred = np.where(mask[:, :, None], pred, 0.0)
            return pred, mask

        self.prefill_true = _readonly(prefill_true)
        self.decode_true = _readonly(decode_true)
        pp, pm = _prep(prefill_predicted, prefill_mask, prefill_true.shape[0], "prefill")
        dp, dm = _prep(decode_predicted, decode_mask, decode_true.shape[0], "decode")
        self.prefill_predicted = _readonly(pp)
        self.decode_predicted = _readonly(dp)
        pm.flags.writeable = False
        dm.flags.writeable = False
        self.prefill_mask = pm
        self.decode_mask = dm
        self._validate()

    # -- structure ---------------------------------------------------------

    @property
    def num_prefill_tokens(self) -> int:
        return self.prefill_true.shape[0]

    @property
    def num_decode_tokens(self) -> int:
        return self.decode_true.shape[0]

    def _validate(self) -> None:
        l = self.shape.num_layers
        for phase in PHASES:
            true = getattr(self, f"{phase}_true")
            pred = getattr(self, f"{phase}_predicted")
            mask = getattr(self, f"{phase}_mask")
            for name, arr, m in (("true", true, None), ("predicted", pred, mask)):
                if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                    raise NormalizationError(
                        f"{phase} {name} scores contain negative/non-finite entries"
                    )
                sums = arr.sum(axis=2)
                if m is None:
                    bad = np.abs(sums - 1.0) > SCORE_SUM_TOL
                else:
                    bad = m & (np.abs(sums - 1.0) > SCORE_SUM_TOL)
                if np.any(bad):
                    t, lay = np.argwhere(bad)[0]
                    raise NormalizationError(
                        f"{phase} token {t} layer {lay}: {name} scores sum to "
                        f"{sums[t, lay]!r}, expected 1 within 1e-6"
                    )
            # no prediction may exist for the last layer (no next gate)
            if np.any(mask[:, l - 1]):
                t = int(np.argwhere(mask[:, l - 1])[0][0])
                raise ShapeMismatchError(
                    f"{phase} token {t}: predicted_scores present on last layer"
                )
        # decode tokens must predict every non-final layer
        if self.num_decode_tokens and l > 1:
            missing = ~self.decode_mask[:, : l - 1]
            if np.any(missing):
                t, lay = np.argwhere(missing)[0]
                raise ShapeMismatchError(
                    f"decode token {t} layer {lay}: predicted_scores missing"
                )

    # -- accessors ----------------------------------------------------------

    def token_routing(self, phase: str, token: int, layer: int) -> TokenRouting:
        true = getattr(self, f"{phase}_true")[token, layer]
        if getattr(self, f"{phase}_mask")[token, layer]:
            pred = getattr(self, f"{phase}_predicted")[token, layer]
        else:
            pred = None
        return TokenRouting(true, pred)

    def token_layers(self, phase: str, token: int) -> tuple[TokenRouting, ...]:
        return tuple(
            self.token_routing(phase, token, l)
            for l in range(self.shape.num_layers)
        )

    def decode_token(self, token: int) -> tuple[TokenRouting, ...]:
        return self.token_layers("decode", token)

    def prefill_token(self, token: int) -> tuple[TokenRouting, ...]:
        return self.token_layers("prefill", token)

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.sequence_id == other.sequence_id
            and np.array_equal(self.prefill_true, other.prefill_true)
            and np.array_equal(self.decode_true, other.decode_true)
            and np.array_equal(self.prefill_predicted, other.prefill_predicted)
            and np.array_equal(self.decode_predicted, other.decode_predicted)
            and np.array_equal(self.prefill_mask, other.prefill_mask)
            and np.array_equal(self.decode_mask, other.decode_mask)
        )

    def __repr__(self):
        s = self.shape
        return (
            f"RoutingTrace({self.sequence_id!r}, L={s.num_layers}, "
            f"E={s.num_experts}, k={s.top_k}, "
            f"prefill={self.num_prefill_tokens}, decode={self.num_decode_tokens})"
        )

    @classmethod
    def from_token_lists(
        cls,
        shape: ModelShape,
        sequence_id: str,
        prefill: Sequence[Sequence[TokenRouting]],
        decode: Sequence[Sequence[TokenRouting]] = (),
    ) -> "RoutingTrace":
        """Build a trace from per-token lists of TokenRouting (test helper)."""

        def pack(tokens: Iterable[Sequence[TokenRouting]], phase: str):
            tokens = list(tokens)
            n = len(tokens)
            l, e = shape.num_layers, shape.num_experts
            true = np.zeros((n, l, e))
            pred = np.zeros((n, l, e))
            mask = np.zeros((n, l), dtype=bool)
            for t, layers in enumerate(tokens):
                if len(layers) != l:
                    raise ShapeMismatchError(
                        f"{phase} token {t} has {len(layers)} layers, expected {l}"
                    )
                for li, tr in enumerate(layers):
                    if tr.true_scores.shape[0] != e:
                        raise ShapeMismatchError(
                            f"{phase} token {t} layer {li}: vector length "
                            f"{tr.true_scores.shape[0]}, expected {e}"
                        )
                    true[t, li] = tr.true_scores
                    if tr.predicted_scores is not None:
                        pred[t, li] = tr.predicted_scores
                        mask[t, li] = True
            return true, pred, mask

        pt, pp, pm = pack(prefill, "prefill")
        dt, dp, dm = pack(decode, "decode")
        return cls(shape, sequence_id, pt, dt, pp, pm, dp, dm)


# -- serialization ----------------------------------------------------------


def _fmt_vector(vec: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in vec) + "]"


def save_trace(trace: RoutingTrace, path) -> None:
    """Write a trace in the canonical JSON-Lines format (exact round-trip)."""
    s = trace.shape
    header = {
        "format_version": 1,
        "sequence_id": trace.sequence_id,
        "L": s.num_layers,
        "E": s.num_experts,
        "k": s.top_k,
        "num_prefill_tokens": trace.num_prefill_tokens,
        "num_decode_tokens": trace.num_decode_tokens,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for phase in PHASES:
        true = getattr(trace, f"{phase}_true")
        pred = getattr(trace, f"{phase}_predicted")
        mask = getattr(trace, f"{phase}_mask")
        for t in range(true.shape[0]):
            layer_parts = []
            for l in range(s.num_layers):
                ts = _fmt_vector(true[t, l])
                ps = _fmt_vector(pred[t, l]) if mask[t, l] else "null"
                layer_parts.append(
                    '{"true_scores":%s,"predicted_scores":%s}' % (ts, ps)
                )
            lines.append(
                '{"phase":"%s","token_index":%d,"layers":[%s]}'
                % (phase, t, ",".join(layer_parts))
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_HEADER_KEYS = {
    "format_version",
    "sequence_id",
    "L",
    "E",
    "k",
    "num_prefill_tokens",
    "num_decode_tokens",
}


def load_trace(path) -> RoutingTrace:
    """Parse and validate a trace file written by save_trace."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise TraceParseError(f"{path}: empty file")

    def parse_line(num, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"{path}: line {num}: {exc}") from None

    header = parse_line(1, raw[0])
    if not isinstance(header, dict) or not _HEADER_KEYS.issubset(header):
        raise TraceParseError(f"{path}: line 1: malformed header record")
    if header["format_version"] != 1:
        raise TraceParseError(
            f"{path}: unsupported format_version {header['format_version']!r}"
        )
    shape = ModelShape(int(header["L"]), int(header["E"]), int(header["k"]))
    n_prefill = int(header["num_prefill_tokens"])
    n_decode = int(header["num_decode_tokens"])
    expected = n_prefill + n_decode
    body = [ln for ln in raw[1:] if ln.strip()]
    if len(body) != expected:
        raise TraceParseError(
            f"{path}: expected {expected} token records, found {len(body)}"
        )

    l, e = shape.num_layers, shape.num_experts
    arrays = {
        "prefill": (np.zeros((n_prefill, l, e)), np.zeros((n_prefill, l, e)),
                    np.zeros((n_prefill, l), dtype=bool)),
        "decode": (np.zeros((n_decode, l, e)), np.zeros((n_decode, l, e)),
                   np.zeros((n_decode, l), dtype=bool)),
    }
    counters = {"prefill": 0, "decode": 0}
    for offset, text in enumerate(body):
        line_no = offset + 2
        rec = parse_line(line_no, text)
        if not isinstance(rec, dict) or "phase" not in rec or "layers" not in rec:
            raise TraceParseError(f"{path}: line {line_no}: malformed token record")
        phase = rec["phase"]
        if phase not in PHASES:
            raise TraceParseError(f"{path}: line {line_no}: unknown phase {phase!r}")
        idx = rec.get("token_index")
        if idx != counters[phase]:
            raise TraceParseError(
                f"{path}: line {line_no}: token_index {idx!r} out of order "
                f"(expected {counters[phase]} for phase {phase})"
            )
        layers = rec["layers"]
        if not isinstance(layers, list) or len(layers) != l:
            raise ShapeMismatchError(
                f"{path}: line {line_no}: token {idx} ({phase}) has "
                f"{len(layers) if isinstance(layers, list) else '?'} layers, "
                f"expected {l}"
            )
        true, pred, mask = arrays[phase]
        for li, entry in enumerate(layers):
            ts = entry.get("true_scores")
            if not isinstance(ts, list) or len(ts) != e:
                raise ShapeMismatchError(
                    f"{path}: line {line_no}: token {idx} layer {li}: "
                    f"true_scores length {len(ts) if isinstance(ts, list) else '?'}, "
                    f"expected {e}"
                )
            vec = np.array(ts, dtype=np.float64)
            _check_line_scores(vec, path, line_no, idx, li, "true_scores")
            true[idx, li] = vec
            ps = entry.get("predicted_scores")
            if ps is not None:
                if not isinstance(ps, list) or len(ps) != e:
                    raise ShapeMismatchError(
                        f"{path}: line {line_no}: token {idx} layer {li}: "
                        f"predicted_scores length mismatch, expected {e}"
                    )
                pvec = np.array(ps, dtype=np.float64)
                _check_line_scores(pvec, path, line_no, idx, li, "predicted_scores")
                pred[idx, li] = pvec
                mask[idx, li] = True
        counters[phase] += 1

    pt, pp, pm = arrays["prefill"]
    dt, dp, dm = arrays["decode"]
    return RoutingTrace(shape, header["sequence_id"], pt, dt, pp, pm, dp, dm)


def _check_line_scores(vec, path, line_no, token, layer, name) -> None:
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise NormalizationError(
            f"{path}: line {line_no}: token {token} layer {layer}: "
            f"{name} has negative or non-finite entries"
        )
    s = float(vec.sum())
    if abs(s - 1.0) > SCORE_SUM_TOL:
        raise NormalizationError(
            f"{path}: line {line_no}: token {token} layer {layer}: "
            f"{name} sum deviates from 1 by {abs(s - 1.0):.3g}"
        )


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax used by the generator and test helpers."""
    z = logits - np.max(logits, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k indices of a single score vector (desc score, ties low index)."""
    from . import _kernels

    return _kernels.topk_rows(scores[None, :], k)[0]


def is_inf(x: float) -> bool:
    return math.isinf(x)
