import numpy as np
import pytest
from hypothesis import given, strategies as st

from fjsplb.buffer import (EMPTY, BufferState, KittingError, apply_kitting, choose_evictions,
                           estimate_switches, kitting_duration)

from oracles import kitting_by_single_parts

A, B, C, D = 0, 1, 2, 3


def state(cats, fills=None, last=None, switches=0):
    fills = fills or [0 if c == EMPTY else 1 for c in cats]
    last = last or [0] * len(cats)
    return BufferState(tuple(cats), tuple(fills), tuple(last), switches, max(last))


def test_one_new_category_beyond_the_empties():
    buf = state([A, B, EMPTY])
    assert estimate_switches(buf, [(A, 1), (C, 1), (D, 1)]) == 1


def test_known_categories_need_no_switch():
    assert estimate_switches(state([A, B, EMPTY]), [(A, 3), (B, 1)]) == 0


def test_empty_buffer_absorbs_up_to_p_categories():
    assert estimate_switches(BufferState.empty(4), [(c, 1) for c in range(4)]) == 0


def test_out_of_range_category():
    with pytest.raises(KittingError):
        estimate_switches(BufferState.empty(2), [(5, 1)], category_count=3)


def test_too_many_categories():
    with pytest.raises(KittingError):
        apply_kitting(BufferState.empty(2), [(0, 1), (1, 1), (2, 1)], 2, 5)


def test_two_switches_eight_parts():
    buf = state([A, B, C])
    res = apply_kitting(buf, [(D, 3), (4, 3), (A, 2)], place_time=2, switch_time=5)
    assert res.switches == 2
    assert res.duration == 8 * 2 + 2 * 5 == 26
    assert res.buffer.total_switches == 2
    assert kitting_duration(8, 2, 2, 5) == 26


def test_empty_parts_touch_nothing_but_the_clock():
    buf = state([A, EMPTY], [2, 0], [3, 0])
    res = apply_kitting(buf, [], 2, 5)
    assert res.switches == 0 and res.duration == 0
    assert res.buffer.categories == buf.categories and res.buffer.fills == buf.fills
    assert res.buffer.total_switches == buf.total_switches


def test_fills_and_placement():
    buf = state([A, EMPTY, B], [2, 0, 1])
    res = apply_kitting(buf, [(A, 1), (C, 4)], 1, 1)
    assert res.buffer.categories == (A, C, B)
    assert res.buffer.fills == (3, 4, 1)
    assert res.evicted == ()
    assert res.placed == ((0, A, 1), (1, C, 4))


def test_no_evictions_needed():
    assert choose_evictions(state([A, B]), 0) == []


def test_lru_picks_the_oldest():
    buf = state([A, B, C], last=[3, 1, 7])
    assert choose_evictions(buf, 1, "lru") == [1]


def test_demand_picks_the_category_nobody_needs():
    buf = state([A, B, C], last=[1, 5, 2])
    # remaining unscheduled work still needs A and C
    demand = {A: 3, C: 1}
    assert choose_evictions(buf, 1, "demand", demand=demand) == [1]
    # ties on demand fall back to least recent use
    assert choose_evictions(buf, 1, "demand", demand={}) == [0]


def test_index_policy_and_protection():
    buf = state([A, B, C])
    assert choose_evictions(buf, 2, "index") == [0, 1]
    assert choose_evictions(buf, 1, "index", protected=[A]) == [1]
    with pytest.raises(KittingError):
        choose_evictions(buf, 3, "index", protected=[A])


buffers = st.integers(1, 6).flatmap(lambda P: st.tuples(
    st.just(P),
    st.lists(st.sampled_from([EMPTY] + list(range(8))), min_size=P, max_size=P).map(
        lambda cs: [c if c == EMPTY or cs.index(c) == i else EMPTY for i, c in enumerate(cs)]),
    st.lists(st.integers(0, 9), min_size=P, max_size=P),
))


def parts_for(P):
    return st.lists(st.tuples(st.integers(0, 7), st.integers(1, 4)), max_size=P, unique_by=lambda t: t[0])


@given(buffers.flatmap(lambda b: st.tuples(st.just(b), parts_for(b[0]), st.sampled_from(["demand", "lru", "index"]),
                                           st.dictionaries(st.integers(0, 7), st.integers(0, 5)))))
def test_apply_matches_estimate_and_invariants(case):
    (P, cats, last), parts, policy, demand = case
    buf = state(cats, last=last, switches=3)
    res = apply_kitting(buf, parts, 2.0, 5.0, policy, demand)
    assert res.switches == estimate_switches(buf, parts)
    assert res.buffer.total_switches == 3 + res.switches
    assert res.buffer.check() == []
    assert len(res.buffer.categories) == P
    assert len(res.evicted) == res.switches
    before = {c: f for c, f in zip(buf.categories, buf.fills) if c != EMPTY}
    for c, n in parts:
        assert dict(zip(res.buffer.categories, res.buffer.fills))[c] == before.get(c, 0) + n


@given(buffers.flatmap(lambda b: st.tuples(st.just(b), parts_for(b[0]))))
def test_extra_empty_pallet_never_hurts(case):
    (P, cats, last), parts = case
    buf = state(cats, last=last)
    bigger = state(list(cats) + [EMPTY], last=list(last) + [0])
    assert estimate_switches(bigger, parts) <= estimate_switches(buf, parts)


@given(buffers, st.lists(st.lists(st.tuples(st.integers(0, 7), st.integers(1, 3)), max_size=3,
                                  unique_by=lambda t: t[0]), max_size=8))
def test_switch_count_is_conserved(b, calls):
    P, cats, last = b
    buf = state(cats, last=last)
    total = 0
    for parts in calls:
        if len(parts) > P:
            continue
        res = apply_kitting(buf, parts, 1, 1, "lru")
        total += res.switches
        buf = res.buffer
        assert buf.check() == []
    assert buf.total_switches == total


def test_matches_single_part_simulator():
    rng = np.random.default_rng(123)
    for _ in range(300):
        P = int(rng.integers(1, 7))
        cats = [int(c) if rng.random() < 0.7 else EMPTY for c in rng.choice(10, size=P, replace=False)]
        fills = [0 if c == EMPTY else int(rng.integers(1, 5)) for c in cats]
        last = [int(x) for x in rng.integers(0, 20, size=P)]
        buf = BufferState(tuple(cats), tuple(fills), tuple(last), 0, 20)
        k = int(rng.integers(0, P + 1))
        parts = [(int(c), int(rng.integers(1, 4))) for c in rng.choice(10, size=k, replace=False)]
        demand = {int(c): int(rng.integers(0, 4)) for c in range(10)}
        res = apply_kitting(buf, parts, 2, 5, "demand", demand)
        sw, dur, held, by_cat = kitting_by_single_parts(cats, fills, last, parts, 2, 5, demand, rng)
        assert (res.switches, res.duration) == (sw, dur)
        assert res.buffer.held() == held
        assert {c: f for c, f in zip(res.buffer.categories, res.buffer.fills) if c != EMPTY} == by_cat
