"""Cache initialization and per-sequence reallocation, oracle-checked."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesim import (
    BudgetError,
    ExpertPlacement,
    MIXTRAL_SHAPE,
    ModelShape,
    ShapeMismatchError,
    allocate_for_sequence,
    init_from_calibration,
    slot_budget_for_ecr,
)


def literal_reallocation(cache_sets, counts, swap_in_out="1.05"):
    """Independent line-by-line interpreter of the swap procedure.

    Works on plain lists/sets with exact rational arithmetic: per layer,
    pair the most active non-cached experts with the least active cached
    ones and swap when hot >= threshold * cold (inclusive).
    """
    threshold = Fraction(swap_in_out)
    num_layers = len(cache_sets)
    num_experts = len(counts[0])
    result = []
    swaps = []
    for layer in range(num_layers):
        cache = set(cache_sets[layer])
        swap_num = int(0.5 * num_experts)
        exps_gpu = [e for e in range(num_experts) if e in cache]
        exps_cpu = [e for e in range(num_experts) if e not in cache]
        activity = counts[layer]
        hot = sorted(exps_cpu, key=lambda e: (-activity[e], e))[:swap_num]
        cold = sorted(exps_gpu, key=lambda e: (activity[e], e))[:swap_num]
        for hot_exp, cold_exp in zip(hot, cold):
            hot_prob = Fraction(activity[hot_exp])
            cold_prob = Fraction(activity[cold_exp])
            if hot_prob >= threshold * cold_prob:
                cache.remove(cold_exp)
                cache.add(hot_exp)
                swaps.append((layer, hot_exp, cold_exp))
        result.append(cache)
    return result, swaps


def test_init_full_cache():
    shape = ModelShape(2, 4, 2)
    calib = np.full((2, 4), 0.5)
    placement = init_from_calibration(calib, 1.0, shape)
    assert placement.on_fast == (frozenset({0, 1, 2, 3}),) * 2
    assert placement.slot_budget == 8


def test_init_budget_5_remainder_rule():
    shape = ModelShape(2, 4, 2)
    calib = np.array(
        [[0.9, 0.7, 0.3, 0.1],
         [0.6, 0.5, 0.4, 0.65]]
    )
    placement = init_from_calibration(calib, 0.625, shape)  # budget 5, c=2, r=1
    assert placement.slot_budget == 5
    assert placement.total_cached() == 5
    # per-layer top-2: layer0 {0,1}, layer1 {3,0}; best remaining prob is
    # layer1's 0.5 (expert 1) vs layer0's 0.3 (expert 2) -> extra to layer1
    assert placement.on_fast[0] == frozenset({0, 1})
    assert placement.on_fast[1] == frozenset({0, 1, 3})


def test_init_remainder_bruteforce_oracle():
    rng = np.random.default_rng(21)
    for _ in range(50):
        l = int(rng.integers(1, 6))
        e = int(rng.integers(2, 9))
        shape = ModelShape(l, e, 1)
        calib = rng.random((l, e))
        budget_max = l * e
        ecr = float(rng.uniform(l / budget_max, 1.0))
        budget = slot_budget_for_ecr(ecr, shape)
        if budget < l:
            continue
        placement = init_from_calibration(calib, ecr, shape)
        # oracle: uniform base capacity, then one extra slot per layer max,
        # granted in order of global probability
        base = budget // l
        expected = [set(sorted(range(e), key=lambda j: (-calib[i, j], j))[:base])
                    for i in range(l)]
        remaining = sorted(
            ((i, j) for i in range(l) for j in range(e) if j not in expected[i]),
            key=lambda ij: (-calib[ij[0], ij[1]], ij[0], ij[1]),
        )
        granted = set()
        for i, j in remaining:
            if len(granted) == budget - base * l:
                break
            if i in granted:
                continue
            expected[i].add(j)
            granted.add(i)
        assert [set(s) for s in placement.on_fast] == expected
        assert placement.total_cached() == budget


def test_init_mixtral_ecr_469():
    calib = np.random.default_rng(0).random((32, 8))
    placement = init_from_calibration(calib, 0.469, MIXTRAL_SHAPE)
    assert placement.slot_budget == 120  # floor(0.469 * 256)
    assert placement.total_cached() == 120
    sizes = placement.layer_sizes()
    assert all(s in (3, 4) for s in sizes)
    assert sum(1 for s in sizes if s == 4) == 24  # remainder slots


def test_init_budget_too_small():
    shape = ModelShape(4, 4, 2)
    with pytest.raises(BudgetError):
        init_from_calibration(np.ones((4, 4)), 0.1, shape)  # budget 1 < 4 layers
    with pytest.raises(BudgetError):
        init_from_calibration(np.ones((4, 4)), 0.0, shape)


def test_init_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        init_from_calibration(np.ones((2, 4)), 0.5, ModelShape(3, 4, 2))


def test_swap_threshold_boundary_inclusive():
    shape = ModelShape(1, 2, 1)
    placement = ExpertPlacement(shape, [{0}], 1)
    # hot 21 vs cold 20: 21 >= 1.05 * 20 exactly -> swap
    _, events = allocate_for_sequence(placement, np.array([[20, 21]]))
    assert len(events) == 1
    assert events[0].swapped_in == 1
    assert events[0].swapped_out == 0
    # hot 20 vs cold 20: below threshold -> no swap
    _, events = allocate_for_sequence(placement, np.array([[20, 20]]))
    assert events == []


def test_swap_worked_example():
    shape = ModelShape(1, 4, 2)
    placement = ExpertPlacement(shape, [{0, 1}], 2)
    counts = np.array([[5, 9, 30, 0]])
    updated, events = allocate_for_sequence(placement, counts)
    assert updated.on_fast[0] == frozenset({1, 2})
    assert len(events) == 1
    ev = events[0]
    assert (ev.swapped_in, ev.swapped_out, ev.hot_tokens, ev.cold_tokens) == (
        2, 0, 30, 5,
    )


def test_swap_preserves_layer_sizes():
    rng = np.random.default_rng(31)
    shape = ModelShape(4, 8, 2)
    placement = init_from_calibration(rng.random((4, 8)), 0.5, shape)
    sizes = placement.layer_sizes()
    counts = rng.integers(0, 64, size=(4, 8))
    updated, events = allocate_for_sequence(placement, counts)
    assert updated.layer_sizes() == sizes
    assert updated.total_cached() == placement.total_cached()


def test_swap_idempotent_when_cache_dominates():
    shape = ModelShape(1, 4, 2)
    placement = ExpertPlacement(shape, [{0, 1}], 2)
    counts = np.array([[50, 40, 3, 2]])
    updated, events = allocate_for_sequence(placement, counts)
    assert events == []
    assert updated == placement


def test_swap_monotone_benefit():
    rng = np.random.default_rng(32)
    for _ in range(50):
        e = int(rng.integers(2, 9))
        shape = ModelShape(1, e, 1)
        cached = set(rng.choice(e, size=int(rng.integers(1, e)), replace=False).tolist())
        placement = ExpertPlacement(shape, [cached], len(cached))
        counts = rng.integers(0, 64, size=(1, e))
        _, events = allocate_for_sequence(placement, counts)
        for ev in events:
            assert Fraction(ev.hot_tokens) >= Fraction("1.05") * ev.cold_tokens


def test_swap_matches_literal_interpreter_randomized():
    rng = np.random.default_rng(33)
    for _ in range(300):
        l = int(rng.integers(1, 4))
        e = int(rng.integers(2, 9))
        shape = ModelShape(l, e, 1)
        sets = []
        for _ in range(l):
            size = int(rng.integers(1, e + 1))
            sets.append(set(rng.choice(e, size=size, replace=False).tolist()))
        budget = sum(len(s) for s in sets)
        placement = ExpertPlacement(shape, sets, budget)
        counts = rng.integers(0, 65, size=(l, e))
        updated, events = allocate_for_sequence(placement, counts)
        expected_sets, expected_swaps = literal_reallocation(
            sets, counts.tolist()
        )
        assert [set(s) for s in updated.on_fast] == expected_sets
        assert [(ev.layer, ev.swapped_in, ev.swapped_out) for ev in events] == (
            expected_swaps
        )


def test_counts_shape_and_integrality_checks():
    shape = ModelShape(1, 4, 2)
    placement = ExpertPlacement(shape, [{0, 1}], 2)
    with pytest.raises(ShapeMismatchError):
        allocate_for_sequence(placement, np.zeros((2, 4)))
    with pytest.raises(ShapeMismatchError):
        allocate_for_sequence(placement, np.array([[0.5, 0, 0, 0]]))
    with pytest.raises(ShapeMismatchError):
        allocate_for_sequence(placement, np.array([[-1, 0, 0, 0]]))


def test_residence_matches_membership():
    shape = ModelShape(2, 4, 2)
    placement = ExpertPlacement(shape, [{0, 1}, {2}], 3)
    assert placement.residence(0, 0) == "fast"
    assert placement.residence(0, 2) == "slow"
    assert placement.residence(1, 2) == "fast"
    with pytest.raises(ShapeMismatchError):
        placement.residence(2, 0)
    with pytest.raises(ShapeMismatchError):
        placement.residence(0, 4)


def test_residence_after_swaps():
    shape = ModelShape(1, 4, 2)
    placement = ExpertPlacement(shape, [{0, 1}], 2)
    updated, events = allocate_for_sequence(placement, np.array([[0, 0, 64, 32]]))
    for ev in events:
        assert updated.residence(ev.layer, ev.swapped_in) == "fast"
        assert updated.residence(ev.layer, ev.swapped_out) == "slow"


def test_placement_json_roundtrip():
    shape = ModelShape(2, 4, 2)
    placement = ExpertPlacement(shape, [{0, 3}, {1}], 3)
    obj = placement.to_json_obj()
    assert obj["on_fast"] == [[0, 3], [1]]
    assert ExpertPlacement.from_json_obj(obj) == placement


@given(
    data=st.data(),
    num_layers=st.integers(1, 4),
    num_experts=st.integers(2, 8),
)
@settings(max_examples=100, deadline=None)
def test_property_swap_conservation(data, num_layers, num_experts):
    shape = ModelShape(num_layers, num_experts, 1)
    sets = []
    for _ in range(num_layers):
        size = data.draw(st.integers(1, num_experts))
        sets.append(set(data.draw(
            st.permutations(range(num_experts)))[:size]))
    counts = np.array([
        [data.draw(st.integers(0, 64)) for _ in range(num_experts)]
        for _ in range(num_layers)
    ])
    placement = ExpertPlacement(shape, sets, sum(len(s) for s in sets))
    updated, _ = allocate_for_sequence(placement, counts)
    assert updated.layer_sizes() == placement.layer_sizes()
