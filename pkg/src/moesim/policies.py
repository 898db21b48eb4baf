"""Per-token execution planning for the four decode engines.

Engines:
  ondemand  - run everything on the fast device, migrating absent experts on
              demand (LRU eviction keeps per-layer capacity).
  prefetch  - on-demand plus predictive early migration: the experts forecast
              for layer l are fetched while layer l-1 runs; wrong forecasts
              fall back to demand migration.
  fiddler   - never migrate; execute each selected expert wherever it lives.
  daop      - never migrate; from the configured start layer the selection
              comes from the previous layer's forecast so slow-device experts
              can pre-calculate on stale activations, with graceful
              degradation swapping surplus slow picks for the best cached
              alternative.

Planning is pure bookkeeping: it fixes *what* runs where and which transfers
happen; the simulator prices *when*.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, PredictionMissingError, ShapeMismatchError
from .placement import ExpertPlacement
from .trace import RoutingTrace, TokenRouting

ENGINES = ("ondemand", "prefetch", "fiddler", "daop")

PREDICTION_START_LAYER_DEFAULT = 4


@dataclass(frozen=True)
class PolicyConfig:
    engine: str
    prediction_start_layer: int = PREDICTION_START_LAYER_DEFAULT
    graceful_degradation: bool = True

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}; pick from {ENGINES}")
        if self.prediction_start_layer < 1:
            raise ConfigError("prediction_start_layer must be >= 1")


@dataclass(frozen=True)
class ExecutedExpert:
    expert: int
    device: str  # fast | slow
    input_source: str  # current | stale
    precalc: bool = False  # slow-device work dispatched from the previous layer


@dataclass(frozen=True)
class Degradation:
    dropped_expert: int
    dropped_score: float
    substitute_expert: int
    substitute_score: float


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    executed: tuple[ExecutedExpert, ...]
    migrations: tuple[int, ...] = ()
    prefetch_issues: tuple[int, ...] = ()  # fetched here for the next layer
    degraded: tuple[Degradation, ...] = ()

    def executed_experts(self) -> tuple[int, ...]:
        return tuple(x.expert for x in self.executed)

    def to_json_obj(self) -> dict:
        return {
            "layer": self.layer,
            "executed": [
                {
                    "expert": x.expert,
                    "device": x.device,
                    "input_source": x.input_source,
                    "precalc": x.precalc,
                }
                for x in self.executed
            ],
            "migrations": list(self.migrations),
            "prefetch_issues": list(self.prefetch_issues),
            "degraded": [
                {
                    "dropped_expert": d.dropped_expert,
                    "dropped_score": d.dropped_score,
                    "substitute_expert": d.substitute_expert,
                    "substitute_score": d.substitute_score,
                }
                for d in self.degraded
            ],
        }


class _LayerCache:
    """Mutable per-layer LRU cache replaying migration decisions."""

    def __init__(self, members, capacity: int):
        # identical initial recency; eviction ties resolve to the lower index
        self.last_use = {int(e): 0 for e in sorted(members)}
        self.capacity = int(capacity)

    def __contains__(self, expert: int) -> bool:
        return expert in self.last_use

    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self.last_use))

    def touch(self, expert: int, step: int) -> None:
        self.last_use[expert] = step

    def insert(self, expert: int, step: int) -> int | None:
        """Add expert, evicting the least recently used one when full."""
        evicted = None
        if expert not in self.last_use and len(self.last_use) >= self.capacity:
            evicted = min(self.last_use, key=lambda e: (self.last_use[e], e))
            del self.last_use[evicted]
        self.last_use[expert] = step
        return evicted


class CacheState:
    """Per-layer LRU caches seeded from a placement snapshot."""

    def __init__(self, placement: ExpertPlacement):
        self.layers = [
            _LayerCache(s, len(s)) for s in placement.on_fast
        ]
        self.step = 0

    def tick(self) -> int:
        self.step += 1
        return self.step


def _token_arrays(token: Sequence[TokenRouting], num_experts: int):
    true = np.stack([tr.true_scores for tr in token])
    pred = [tr.predicted_scores for tr in token]
    if true.shape[1] != num_experts:
        raise ShapeMismatchError(
            f"token vectors have length {true.shape[1]}, expected {num_experts}"
        )
    return true, pred


def _require_prediction(pred_rows, layer: int):
    row = pred_rows[layer]
    if row is None:
        raise PredictionMissingError(
            f"layer {layer} record carries no prediction for layer {layer + 1}"
        )
    return row


class _PlannerBase:
    def __init__(self, placement: ExpertPlacement, config: PolicyConfig):
        self.placement = placement
        self.config = config
        self.shape = placement.shape

    def plan_token(self, token: Sequence[TokenRouting]) -> list[LayerPlan]:
        raise NotImplementedError


class OnDemandPlanner(_PlannerBase):
    def __init__(self, placement, config):
        super().__init__(placement, config)
        self.cache = CacheState(placement)

    def plan_token(self, token):
        true, _ = _token_arrays(token, self.shape.num_experts)
        top = _kernels.topk_rows(true, self.shape.top_k)
        plans = []
        for l in range(self.shape.num_layers):
            step = self.cache.tick()
            layer_cache = self.cache.layers[l]
            need = [int(e) for e in top[l]]
            absent = sorted(e for e in need if e not in layer_cache)
            for e in need:
                if e in layer_cache:
                    layer_cache.touch(e, step)
            for e in absent:
                layer_cache.insert(e, step)
            executed = tuple(
                ExecutedExpert(e, "fast", "current") for e in need
            )
            plans.append(
                LayerPlan(layer=l, executed=executed, migrations=tuple(absent))
            )
        return plans


class PrefetchPlanner(_PlannerBase):
    def __init__(self, placement, config):
        super().__init__(placement, config)
        self.cache = CacheState(placement)

    def plan_token(self, token):
        true, pred = _token_arrays(token, self.shape.num_experts)
        top = _kernels.topk_rows(true, self.shape.top_k)
        start = self.config.prediction_start_layer
        l_count = self.shape.num_layers
        plans: list[LayerPlan] = []
        prefetched: dict[int, tuple[int, ...]] = {}
        for l in range(l_count):
            step = self.cache.tick()
            layer_cache = self.cache.layers[l]
            need = [int(e) for e in top[l]]
            absent = sorted(e for e in need if e not in layer_cache)
            for e in need:
                if e in layer_cache:
                    layer_cache.touch(e, step)
            for e in absent:
                layer_cache.insert(e, step)
            issues: tuple[int, ...] = ()
            nxt = l + 1
            if nxt < l_count and nxt >= start:
                row = _require_prediction(pred, l)
                pred_top = _kernels.topk_rows(row[None, :], self.shape.top_k)[0]
                nxt_cache = self.cache.layers[nxt]
                fetch = sorted(
                    int(e) for e in pred_top if int(e) not in nxt_cache
                )
                for e in fetch:
                    nxt_cache.insert(e, step)
                issues = tuple(fetch)
                prefetched[nxt] = issues
            executed = tuple(ExecutedExpert(e, "fast", "current") for e in need)
            plans.append(
                LayerPlan(
                    layer=l,
                    executed=executed,
                    migrations=tuple(absent),
                    prefetch_issues=issues,
                )
            )
        return plans


class FiddlerPlanner(_PlannerBase):
    def plan_token(self, token):
        true, _ = _token_arrays(token, self.shape.num_experts)
        top = _kernels.topk_rows(true, self.shape.top_k)
        plans = []
        for l in range(self.shape.num_layers):
            executed = tuple(
                ExecutedExpert(
                    int(e), self.placement.residence(l, int(e)), "current"
                )
                for e in top[l]
            )
            plans.append(LayerPlan(layer=l, executed=executed))
        return plans


def degrade_selection(
    scores: np.ndarray, selection: list[int], fast_experts
) -> tuple[list[int], tuple[Degradation, ...]]:
    """Swap surplus slow-resident picks for the best cached alternatives.

    While at least two selected experts are slow-resident and an unselected
    fast-resident expert exists, drop the lowest-scored slow pick (ties to
    the lower index) for the highest-scored fast alternative. The decision
    depends only on score order, so any positive rescaling of `scores`
    leaves it unchanged. When no alternative exists the selection stays.
    """
    fast_experts = set(fast_experts)
    selection = list(selection)
    degraded: list[Degradation] = []
    while True:
        slow_sel = [e for e in selection if e not in fast_experts]
        if len(slow_sel) < 2:
            break
        alternatives = [e for e in fast_experts if e not in selection]
        if not alternatives:
            break
        drop = min(slow_sel, key=lambda e: (scores[e], e))
        sub = max(alternatives, key=lambda e: (scores[e], -e))
        selection[selection.index(drop)] = sub
        degraded.append(
            Degradation(
                dropped_expert=drop,
                dropped_score=float(scores[drop]),
                substitute_expert=sub,
                substitute_score=float(scores[sub]),
            )
        )
    return selection, tuple(degraded)


class DaopPlanner(_PlannerBase):
    def plan_token(self, token):
        true, pred = _token_arrays(token, self.shape.num_experts)
        top = _kernels.topk_rows(true, self.shape.top_k)
        start = self.config.prediction_start_layer
        k = self.shape.top_k
        plans = []
        for l in range(self.shape.num_layers):
            if l < start:
                executed = tuple(
                    ExecutedExpert(
                        int(e), self.placement.residence(l, int(e)), "current"
                    )
                    for e in top[l]
                )
                plans.append(LayerPlan(layer=l, executed=executed))
                continue
            scores = _require_prediction(pred, l - 1)
            selection = [
                int(e) for e in _kernels.topk_rows(scores[None, :], k)[0]
            ]
            degraded: tuple[Degradation, ...] = ()
            if self.config.graceful_degradation:
                selection, degraded = degrade_selection(
                    scores, selection, self.placement.on_fast[l]
                )
            executed = []
            for e in selection:
                if self.placement.residence(l, e) == "slow":
                    executed.append(ExecutedExpert(e, "slow", "stale", precalc=True))
                else:
                    executed.append(ExecutedExpert(e, "fast", "current"))
            plans.append(
                LayerPlan(
                    layer=l, executed=tuple(executed), degraded=degraded
                )
            )
        return plans


_PLANNERS = {
    "ondemand": OnDemandPlanner,
    "prefetch": PrefetchPlanner,
    "fiddler": FiddlerPlanner,
    "daop": DaopPlanner,
}


def make_planner(placement: ExpertPlacement, config: PolicyConfig) -> _PlannerBase:
    return _PLANNERS[config.engine](placement, config)


def _single_token_plans(engine, token, placement, config):
    cfg = config or PolicyConfig(engine=engine)
    if cfg.engine != engine:
        cfg = PolicyConfig(
            engine=engine,
            prediction_start_layer=cfg.prediction_start_layer,
            graceful_degradation=cfg.graceful_degradation,
        )
    return make_planner(placement, cfg).plan_token(token)


def plan_token_ondemand(token, placement, config=None) -> list[LayerPlan]:
    """Single-token on-demand plan starting from a fresh cache snapshot."""
    return _single_token_plans("ondemand", token, placement, config)


def plan_token_prefetch(token, placement, config=None) -> list[LayerPlan]:
    return _single_token_plans("prefetch", token, placement, config)


def plan_token_fiddler(token, placement, config=None) -> list[LayerPlan]:
    return _single_token_plans("fiddler", token, placement, config)


def plan_token_daop(token, placement, config=None) -> list[LayerPlan]:
    return _single_token_plans("daop", token, placement, config)


def plan_trace_decode(
    trace: RoutingTrace, placement: ExpertPlacement, config: PolicyConfig
) -> list[list[LayerPlan]]:
    """Plans for every decode token, replaying cache state across tokens."""
    planner = make_planner(placement, config)
    return [
        planner.plan_token(trace.decode_token(t))
        for t in range(trace.num_decode_tokens)
    ]
