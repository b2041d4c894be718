"""Discrete-event simulation of GPipe and 1F1B pipeline schedules.

Each stage owns one compute resource that runs its forward/backward ops in a
fixed schedule order. Every directed stage-to-stage channel is a separate
resource, so transfers on one channel are serialized but overlap with compute.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

F, B, SEND_F, SEND_B, SYNC = "F", "B", "SendF", "SendB", "Sync"
# tie-break among events finishing at the same instant
_KIND_RANK = {F: 0, B: 1, SEND_F: 2, SEND_B: 3, SYNC: 4}


@dataclass(frozen=True)
class StageTimes:
    fwd_s: float
    bwd_s: float
    send_fwd_s: float = 0.0  # hop to the next stage
    send_bwd_s: float = 0.0  # hop to the previous stage
    sync_s: float = 0.0      # gradient allreduce after the flush
    static_bytes: float = 0.0
    activation_bytes: float = 0.0  # stored per in-flight micro-batch

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"StageTimes.{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class TraceEvent:
    stage: int
    kind: str
    microbatch: int
    start_s: float
    end_s: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SimResult:
    iteration_time_s: float
    per_stage_busy_s: tuple
    bubble_ratio: tuple
    aggregate_bubble_ratio: float
    peak_in_flight: tuple
    peak_memory_bytes: tuple
    trace: tuple

    @property
    def num_stages(self) -> int:
        return len(self.per_stage_busy_s)


def stage_order(stage: int, P: int, M: int, schedule: str = "1f1b") -> List[Tuple[str, int]]:
    """The sequence of (kind, microbatch) compute ops a stage executes."""
    if schedule == "gpipe":
        return [(F, m) for m in range(M)] + [(B, m) for m in range(M)]
    if schedule != "1f1b":
        raise ValueError(f"unknown schedule {schedule!r}")
    warmup = min(P - stage, M)
    ops = [(F, m) for m in range(warmup)]
    nf = warmup
    for nb in range(M):
        ops.append((B, nb))
        if nf < M:
            ops.append((F, nf))
            nf += 1
    return ops


def bubble_ratio(result: SimResult):
    """Per-stage and aggregate idle fractions of the iteration."""
    T = result.iteration_time_s
    busy = result.per_stage_busy_s
    if T <= 0:
        return tuple(0.0 for _ in busy), 0.0
    per = tuple(max(0.0, 1.0 - b / T) for b in busy)
    agg = max(0.0, 1.0 - sum(busy) / (len(busy) * T))
    return per, agg


def simulate_pipeline(times: Sequence[StageTimes], M: int, schedule: str = "1f1b") -> SimResult:
    P = len(times)
    if P < 1:
        raise ValueError("need at least one stage")
    if M < 1:
        raise ValueError("need at least one micro-batch")
    orders = [stage_order(i, P, M, schedule) for i in range(P)]
    ptr = [0] * P
    running = [False] * P
    busy = [0.0] * P
    in_flight = [0] * P
    peak = [0] * P
    chan_free = {}
    # arrival time of the input a compute op waits on: (kind, stage, mb) -> t
    ready = {}
    trace = []
    heap = []
    now = 0.0

    def push(ev: TraceEvent):
        heapq.heappush(heap, (ev.end_s, ev.stage, _KIND_RANK[ev.kind], ev.microbatch, ev))

    def try_start(i: int):
        if running[i] or ptr[i] >= len(orders[i]):
            return
        kind, m = orders[i][ptr[i]]
        if kind == F and i > 0 and (F, i, m) not in ready:
            return
        if kind == B and i < P - 1 and (B, i, m) not in ready:
            return
        dur = times[i].fwd_s if kind == F else times[i].bwd_s
        if kind == F:
            in_flight[i] += 1
            peak[i] = max(peak[i], in_flight[i])
        ptr[i] += 1
        running[i] = True
        busy[i] += dur
        push(TraceEvent(i, kind, m, now, now + dur))

    def send(i: int, kind: str, m: int):
        dst = i + 1 if kind == SEND_F else i - 1
        dur = times[i].send_fwd_s if kind == SEND_F else times[i].send_bwd_s
        start = max(now, chan_free.get((i, dst), 0.0))
        chan_free[(i, dst)] = start + dur
        push(TraceEvent(i, kind, m, start, start + dur))

    for i in range(P):
        try_start(i)

    while heap:
        now, _, _, _, ev = heapq.heappop(heap)
        trace.append(ev)
        i, kind, m = ev.stage, ev.kind, ev.microbatch
        if kind in (F, B):
            running[i] = False
            if kind == B:
                in_flight[i] -= 1
            if kind == F and i < P - 1:
                send(i, SEND_F, m)
            elif kind == B and i > 0:
                send(i, SEND_B, m)
            if ptr[i] == len(orders[i]) and times[i].sync_s > 0:
                running[i] = True
                push(TraceEvent(i, SYNC, 0, now, now + times[i].sync_s))
            try_start(i)
        elif kind == SEND_F:
            ready[(F, i + 1, m)] = now
            try_start(i + 1)
        elif kind == SEND_B:
            ready[(B, i - 1, m)] = now
            try_start(i - 1)

    if any(p < len(o) for p, o in zip(ptr, orders)):
        raise RuntimeError("pipeline schedule deadlocked")

    T = max(ev.end_s for ev in trace)
    busy_t = tuple(busy)
    partial = SimResult(T, busy_t, (), 0.0, (), (), ())
    per, agg = bubble_ratio(partial)
    mem = tuple(t.static_bytes + p * t.activation_bytes for t, p in zip(times, peak))
    return SimResult(T, busy_t, per, agg, tuple(peak), mem, tuple(trace))


def simulate(plan, times: Sequence[StageTimes], M: Optional[int] = None) -> SimResult:
    """Simulate `plan`'s schedule; M defaults to the plan's micro-batch count."""
    if len(times) != plan.num_stages:
        raise ValueError(f"plan has {plan.num_stages} stages but {len(times)} StageTimes given")
    if M is None:
        M = plan.micro_batches_per_dp_replica
    return simulate_pipeline(times, M, plan.schedule)


def trace_to_json(trace: Sequence[TraceEvent]) -> str:
    return json.dumps([ev.to_dict() for ev in trace], indent=1)


def trace_from_json(text: str) -> List[TraceEvent]:
    return [TraceEvent(**d) for d in json.loads(text)]


def iteration_time(times: Sequence[StageTimes], M: int, schedule: str = "1f1b") -> float:
    """Iteration time only, without building a trace.

    Same dependency and resource rules as :func:`simulate_pipeline`, resolved
    by sweeping each stage's fixed op order instead of an event queue, so the
    result is bit-identical and much cheaper. Used inside the planner's inner
    loop.
    """
    P = len(times)
    if P < 1 or M < 1:
        raise ValueError("need at least one stage and one micro-batch")
    orders = [stage_order(i, P, M, schedule) for i in range(P)]
    f_ready = [[None] * M for _ in range(P)]
    b_ready = [[None] * M for _ in range(P)]
    free = [0.0] * P
    chan_f = [0.0] * P
    chan_b = [0.0] * P
    ptr = [0] * P
    remaining = sum(len(o) for o in orders)
    last = P - 1
    while remaining:
        moved = 0
        for i in range(P):
            order, p, n = orders[i], ptr[i], len(orders[i])
            t = times[i]
            while p < n:
                kind, m = order[p]
                if kind == F:
                    r = f_ready[i][m] if i else 0.0
                    if r is None:
                        break
                    s = free[i] if free[i] > r else r
                    e = s + t.fwd_s
                    if i < last:
                        ss = e if e > chan_f[i] else chan_f[i]
                        chan_f[i] = ss + t.send_fwd_s
                        f_ready[i + 1][m] = chan_f[i]
                else:
                    r = b_ready[i][m] if i < last else 0.0
                    if r is None:
                        break
                    s = free[i] if free[i] > r else r
                    e = s + t.bwd_s
                    if i:
                        ss = e if e > chan_b[i] else chan_b[i]
                        chan_b[i] = ss + t.send_bwd_s
                        b_ready[i - 1][m] = chan_b[i]
                free[i] = e
                p += 1
            moved += p - ptr[i]
            ptr[i] = p
        if not moved:
            raise RuntimeError("pipeline schedule deadlocked")
        remaining -= moved
    return max(free[i] + times[i].sync_s if times[i].sync_s > 0 else free[i] for i in range(P))
