"""Independent feasibility check for a produced schedule.

Re-derives readiness from the arrival profiles and batch times from the
cost models; shares no code with the planner beyond those primitives.
"""
from __future__ import annotations

import math

from .cost_model import estimate_agg_duration, estimate_duration
from .workload import cumulative_tuples, tuples_in_window, window_offset


def _ms_up(seconds):
    return math.ceil(round(seconds * 1000.0, 6))


def _arrival_time(profile, count):
    """Bisection on the cumulative count: first ms with >= count tuples."""
    lo, hi = profile.start_ms - 1, profile.end_ms
    if cumulative_tuples(profile, hi) < count:
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cumulative_tuples(profile, mid) >= count:
            hi = mid
        else:
            lo = mid
    return hi


def check_schedule(schedule, workload, states=None, check_durations=True):
    """Return a list of human-readable violations (empty means feasible)."""
    problems = []
    entries = schedule.entries
    config_nodes = {c.id: c.worker_nodes for c in workload.configs}
    prev = None
    for e in entries:
        if e.bst > e.bet:
            problems.append(f"{e.query_id}#{e.batch_no}: starts after it ends")
        if prev is not None and prev.bet > e.bst:
            problems.append(f"{e.query_id}#{e.batch_no}: overlaps {prev.query_id}#{prev.batch_no}")
        if config_nodes.get(e.config_id) != e.req_nodes:
            problems.append(f"{e.query_id}#{e.batch_no}: {e.req_nodes} nodes is not config {e.config_id}")
        if e.bst < schedule.sim_start:
            problems.append(f"{e.query_id}#{e.batch_no}: starts before the plan start")
        prev = e

    start_state = {}
    if states is not None:
        start_state = {s.qid: s for s in states}
    for q in workload.queries:
        prof = workload.profile_of(q)
        models = workload.models_of(q)
        s0 = start_state.get(q.query_id)
        if s0 is not None:
            total, done, offset = s0.total, s0.consumed, s0.offset
            folds, unfolded = s0.folds, s0.unfolded
        else:
            total = tuples_in_window(prof, q)
            done, offset = 0, window_offset(prof, q)
            folds = unfolded = 0
            if states is not None:
                # query absent from the restart set: already finished
                continue
        mine = [e for e in entries if e.query_id == q.query_id]
        got = done + sum(e.tuples for e in mine)
        if got != total:
            problems.append(f"{q.query_id}: {got} of {total} tuples scheduled")
            continue
        if total == done:
            continue
        if not mine[-1].final or any(e.final for e in mine[:-1]):
            problems.append(f"{q.query_id}: final flag misplaced")
        used = done
        for e in mine:
            used += e.tuples
            if e is mine[-1]:
                ready = max(q.wind_end, _arrival_time(prof, offset + used) or q.wind_end)
            else:
                ready = _arrival_time(prof, offset + used)
            if ready is None or e.bst < ready:
                problems.append(f"{q.query_id}#{e.batch_no}: starts at {e.bst} before its tuples arrive ({ready})")
            if check_durations:
                want = _ms_up(estimate_duration(models.proc, e.req_nodes, e.tuples))
                if e.partial_agg:
                    want += _ms_up(estimate_agg_duration(models.agg, e.req_nodes, unfolded + 1)) if unfolded + 1 > 1 else 0
                    folds, unfolded = folds + 1, 0
                else:
                    unfolded += 1
                if e.final:
                    k = folds + unfolded
                    want += _ms_up(estimate_agg_duration(models.agg, e.req_nodes, k)) if k > 1 else 0
                if e.bet - e.bst != want:
                    problems.append(f"{q.query_id}#{e.batch_no}: lasts {e.bet - e.bst} ms, model says {want}")
        if mine[-1].bet > q.deadline:
            problems.append(f"{q.query_id}: finishes at {mine[-1].bet} after deadline {q.deadline}")

    tl = schedule.timeline
    for e in entries:
        # sample the step function at the batch start and at every breakpoint inside it
        points = [e.bst] + [t for t, _ in tl.points if e.bst < t < e.bet]
        if any(tl.at(t) < e.req_nodes for t in points):
            problems.append(f"{e.query_id}#{e.batch_no}: timeline has fewer than {e.req_nodes} nodes")
    return problems
