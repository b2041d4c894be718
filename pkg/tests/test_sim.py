import pytest
from hypothesis import given, settings, strategies as st

from hetplan.core import plan_from_layer_counts
from hetplan.sim import (StageTimes, bubble_ratio, iteration_time, simulate, simulate_pipeline,
                         stage_order, trace_from_json, trace_to_json)


def uniform(P, f=1.0, b=2.0, comm=0.0):
    return [StageTimes(f, b, comm, comm) for _ in range(P)]


def test_single_stage():
    r = simulate_pipeline([StageTimes(1.0, 2.0)], 1)
    assert r.iteration_time_s == 3.0
    assert r.bubble_ratio == (0.0,) and r.aggregate_bubble_ratio == 0.0


def test_two_stage_examples():
    r = simulate_pipeline(uniform(2, 1.0, 1.0), 2)
    assert r.iteration_time_s == 6.0
    assert r.aggregate_bubble_ratio == pytest.approx(1 / 3)
    r = simulate_pipeline(uniform(2, 1.0, 1.0, 0.5), 1)
    assert r.iteration_time_s == 5.0


def test_bubble_four_stages():
    r = simulate_pipeline(uniform(4, 1.0, 1.0), 12)
    assert r.aggregate_bubble_ratio == pytest.approx(0.2)
    per, agg = bubble_ratio(r)
    assert per == r.bubble_ratio and agg == r.aggregate_bubble_ratio


def test_closed_form_grid():
    for P in range(1, 9):
        for M in range(1, 17):
            r = simulate_pipeline(uniform(P, 1.0, 2.0), M)
            assert r.iteration_time_s == (M + P - 1) * 3.0
            assert r.peak_in_flight == tuple(min(M, P - i) for i in range(P))
            g = simulate_pipeline(uniform(P, 1.0, 2.0), M, "gpipe")
            assert g.peak_in_flight == (M,) * P


def test_stage_order_shapes():
    assert stage_order(0, 3, 4) == [("F", 0), ("F", 1), ("F", 2), ("B", 0), ("F", 3),
                                    ("B", 1), ("B", 2), ("B", 3)]
    assert stage_order(2, 3, 2) == [("F", 0), ("B", 0), ("F", 1), ("B", 1)]
    with pytest.raises(ValueError):
        stage_order(0, 1, 1, "chimera")


def test_negative_times_rejected():
    with pytest.raises(ValueError):
        StageTimes(-1.0, 1.0)
    with pytest.raises(ValueError):
        StageTimes(1.0, 1.0, send_fwd_s=-0.1)


def test_sync_extends_iteration():
    r = simulate_pipeline([StageTimes(1.0, 2.0, sync_s=0.5)], 2)
    assert r.iteration_time_s == 6.5
    assert r.trace[-1].kind == "Sync"


def test_simulate_uses_plan():
    plan = plan_from_layer_counts([1, 1], ["a", "a"], nodes_used=[1, 1], tp=[1, 1], dp=1,
                                  micro_batches=3)
    assert simulate(plan, uniform(2, 1.0, 1.0)).iteration_time_s == 8.0
    with pytest.raises(ValueError):
        simulate(plan, uniform(3))


def test_trace_json_round_trip():
    r = simulate_pipeline(uniform(3, 1.0, 2.0, 0.25), 4)
    assert tuple(trace_from_json(trace_to_json(r.trace))) == r.trace


stage = st.builds(StageTimes,
                  st.floats(0.01, 5), st.floats(0.01, 5),
                  st.floats(0, 2), st.floats(0, 2), st.floats(0, 1))
case = st.tuples(st.lists(stage, min_size=1, max_size=6), st.integers(1, 10),
                 st.sampled_from(["1f1b", "gpipe"]))


@settings(max_examples=150, deadline=None)
@given(case)
def test_trace_invariants(c):
    times, M, schedule = c
    P = len(times)
    r = simulate_pipeline(times, M, schedule)
    assert r.iteration_time_s == max(ev.end_s for ev in r.trace)
    ev = {(e.stage, e.kind, e.microbatch): e for e in r.trace}
    for i in range(P):
        ops = sorted((e for e in r.trace if e.stage == i and e.kind in ("F", "B")),
                     key=lambda e: e.start_s)
        assert len(ops) == 2 * M
        for a, b in zip(ops, ops[1:]):
            assert a.end_s <= b.start_s
        for m in range(M):
            if i > 0:
                assert ev[(i - 1, "SendF", m)].end_s <= ev[(i, "F", m)].start_s
                assert ev[(i - 1, "F", m)].end_s <= ev[(i - 1, "SendF", m)].start_s
            if i < P - 1:
                assert ev[(i + 1, "SendB", m)].end_s <= ev[(i, "B", m)].start_s
            assert ev[(i, "F", m)].end_s <= ev[(i, "B", m)].start_s
        sends = sorted((e for e in r.trace if e.stage == i and e.kind == "SendF"),
                       key=lambda e: e.start_s)
        for a, b in zip(sends, sends[1:]):
            assert a.end_s <= b.start_s
    assert all(0.0 <= x <= 1.0 for x in r.bubble_ratio)


@settings(max_examples=150, deadline=None)
@given(case)
def test_fast_path_matches_event_simulation(c):
    times, M, schedule = c
    assert iteration_time(times, M, schedule) == simulate_pipeline(times, M, schedule).iteration_time_s


@settings(max_examples=60, deadline=None)
@given(case)
def test_deterministic_and_gpipe_holds_more(c):
    times, M, _ = c
    a = simulate_pipeline(times, M)
    assert a == simulate_pipeline(times, M)
    g = simulate_pipeline(times, M, "gpipe")
    assert all(x >= y for x, y in zip(g.peak_in_flight, a.peak_in_flight))
    assert all(x >= y for x, y in zip(g.peak_memory_bytes, a.peak_memory_bytes))
