"""Expert cache ownership: calibration-based init and per-sequence swaps.

The cache is a fixed budget of fast-device (GPU) expert slots spread across
layers; every expert not cached for its layer lives on the slow device (CPU).
Initialization standardizes per-layer capacity from a calibration activation
matrix; per-sequence reallocation swaps hot slow-device experts against cold
cached ones during prefill, holding each layer's size constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import BudgetError, ShapeMismatchError
from .metrics import ActivationMatrix
from .trace import ModelShape

SWAP_IN_OUT_DEFAULT = 1.05


@dataclass(frozen=True)
class SwapEvent:
    """One executed hot/cold exchange at a layer during prefill."""

    layer: int
    swapped_in: int
    swapped_out: int
    hot_tokens: int
    cold_tokens: int


class ExpertPlacement:
    """Which experts occupy fast-device slots, per layer. Immutable value."""

    def __init__(self, shape: ModelShape, on_fast, slot_budget: int):
        self.shape = shape
        sets = tuple(frozenset(int(x) for x in layer) for layer in on_fast)
        if len(sets) != shape.num_layers:
            raise ShapeMismatchError(
                f"placement covers {len(sets)} layers, expected {shape.num_layers}"
            )
        for l, s in enumerate(sets):
            for e in s:
                if not 0 <= e < shape.num_experts:
                    raise ShapeMismatchError(
                        f"layer {l}: expert index {e} out of range"
                    )
        total = sum(len(s) for s in sets)
        if total > slot_budget:
            raise BudgetError(
                f"{total} cached experts exceed slot budget {slot_budget}"
            )
        self.on_fast = sets
        self.slot_budget = int(slot_budget)

    def residence(self, layer: int, expert: int) -> str:
        """'fast' when the expert is cached for the layer, else 'slow'."""
        if not 0 <= layer < self.shape.num_layers:
            raise ShapeMismatchError(f"layer index {layer} out of range")
        if not 0 <= expert < self.shape.num_experts:
            raise ShapeMismatchError(f"expert index {expert} out of range")
        return "fast" if expert in self.on_fast[layer] else "slow"

    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.on_fast)

    def total_cached(self) -> int:
        return sum(self.layer_sizes())

    def with_swaps(self, events) -> "ExpertPlacement":
        sets = [set(s) for s in self.on_fast]
        for ev in events:
            if ev.swapped_out not in sets[ev.layer]:
                raise ShapeMismatchError(
                    f"layer {ev.layer}: cannot swap out non-cached expert "
                    f"{ev.swapped_out}"
                )
            if ev.swapped_in in sets[ev.layer]:
                raise ShapeMismatchError(
                    f"layer {ev.layer}: expert {ev.swapped_in} already cached"
                )
            sets[ev.layer].discard(ev.swapped_out)
            sets[ev.layer].add(ev.swapped_in)
        return ExpertPlacement(self.shape, sets, self.slot_budget)

    def to_json_obj(self) -> dict:
        return {
            "slot_budget": self.slot_budget,
            "shape": {
                "num_layers": self.shape.num_layers,
                "num_experts": self.shape.num_experts,
                "top_k": self.shape.top_k,
            },
            "on_fast": [sorted(s) for s in self.on_fast],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExpertPlacement":
        sh = obj["shape"]
        shape = ModelShape(sh["num_layers"], sh["num_experts"], sh["top_k"])
        return cls(shape, obj["on_fast"], obj["slot_budget"])

    def __eq__(self, other):
        if not isinstance(other, ExpertPlacement):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.slot_budget == other.slot_budget
            and self.on_fast == other.on_fast
        )

    def __repr__(self):
        return (
            f"ExpertPlacement(budget={self.slot_budget}, "
            f"sizes={self.layer_sizes()})"
        )


def slot_budget_for_ecr(ecr: float, shape: ModelShape) -> int:
    """floor(ECR * L * E): total fast-device expert slots."""
    return math.floor(ecr * shape.num_layers * shape.num_experts)


def init_from_calibration(
    calib, ecr: float, shape: ModelShape | None = None
) -> ExpertPlacement:
    """Fill the cache from decode-phase calibration probabilities.

    Uniform per-layer base capacity c = floor(budget / L), each layer keeping
    its top-c experts (ties to the lower index). The remainder (< L slots)
    goes to the globally most probable uncached experts, at most one extra
    per layer, ties broken by lower layer then lower expert index.
    """
    values = calib.values if isinstance(calib, ActivationMatrix) else np.asarray(
        calib, dtype=np.float64
    )
    if values.ndim != 2:
        raise ShapeMismatchError("calibration matrix must be 2-D")
    l, e = values.shape
    if shape is None:
        shape = ModelShape(l, e, min(2, e))
    if (shape.num_layers, shape.num_experts) != (l, e):
        raise ShapeMismatchError(
            f"calibration matrix {values.shape} does not match shape "
            f"({shape.num_layers}, {shape.num_experts})"
        )
    if not 0.0 < ecr <= 1.0:
        raise BudgetError(f"ecr must be in (0, 1], got {ecr}")
    budget = slot_budget_for_ecr(ecr, shape)
    if budget < l:
        raise BudgetError(
            f"budget {budget} cannot give every one of {l} layers a slot"
        )
    base = budget // l
    remainder = budget - base * l

    sets: list[set[int]] = []
    for layer in range(l):
        order = sorted(range(e), key=lambda j: (-values[layer, j], j))
        sets.append(set(order[:base]))

    if remainder:
        candidates = sorted(
            (
                (layer, j)
                for layer in range(l)
                for j in range(e)
                if j not in sets[layer]
            ),
            key=lambda lj: (-values[lj[0], lj[1]], lj[0], lj[1]),
        )
        granted: set[int] = set()
        for layer, j in candidates:
            if len(granted) == remainder:
                break
            if layer in granted:
                continue
            sets[layer].add(j)
            granted.add(layer)

    return ExpertPlacement(shape, sets, budget)


def allocate_for_sequence(
    placement: ExpertPlacement,
    prefill_counts: np.ndarray,
    swap_in_out: float = SWAP_IN_OUT_DEFAULT,
) -> tuple[ExpertPlacement, list[SwapEvent]]:
    """Per-sequence reallocation from prefill routing activity.

    Per layer, the floor(E/2) most active slow-device experts are paired with
    the floor(E/2) least active cached ones; a pair swaps when
    hot_count >= swap_in_out * cold_count (inclusive, evaluated in exact
    rational arithmetic so threshold boundaries like 21 vs 1.05*20 land on
    the swap side). Each layer's cache size is unchanged by every swap.
    """
    shape = placement.shape
    counts = np.asarray(prefill_counts)
    if counts.shape != (shape.num_layers, shape.num_experts):
        raise ShapeMismatchError(
            f"count matrix {counts.shape} does not match "
            f"({shape.num_layers}, {shape.num_experts})"
        )
    if np.any(counts < 0) or not np.all(counts == np.floor(counts)):
        raise ShapeMismatchError("prefill counts must be nonnegative integers")
    counts = counts.astype(np.int64)
    threshold = Fraction(str(float(swap_in_out)))

    swap_num = shape.num_experts // 2
    events: list[SwapEvent] = []
    new_sets: list[set[int]] = []
    for layer in range(shape.num_layers):
        cached = set(placement.on_fast[layer])
        slow = [j for j in range(shape.num_experts) if j not in cached]
        fast = sorted(cached)
        act = counts[layer]
        hot = sorted(slow, key=lambda j: (-act[j], j))[:swap_num]
        cold = sorted(fast, key=lambda j: (act[j], j))[:swap_num]
        for h, c in zip(hot, cold):
            if Fraction(int(act[h])) >= threshold * int(act[c]):
                cached.discard(c)
                cached.add(h)
                events.append(
                    SwapEvent(
                        layer=layer,
                        swapped_in=h,
                        swapped_out=c,
                        hot_tokens=int(act[h]),
                        cold_tokens=int(act[c]),
                    )
                )
        new_sets.append(cached)
    return ExpertPlacement(shape, new_sets, placement.slot_budget), events
