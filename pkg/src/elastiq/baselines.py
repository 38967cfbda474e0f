"""Comparison strategies: pinned configuration, naive LLF and threshold autoscaling."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .cost_model import NodeTimeline, schedule_cost
from .errors import Infeasible, InfeasibleBatch
from .executor import (
    Event,
    ExecutionTrace,
    ScenarioConfig,
    _finish,
    _Live,
    _node_events,
    _proc_ms,
    _run_batch,
    _sorted,
    select_next_batch,
    slack_of,
)
from .simulator import (
    SimParams,
    Workload,
    _package,
    _Planner,
    _rank,
    batch_sizes_for,
    choose_schedule,
    initial_states,
    release_idle,
)


def fixed_config_schedule(workload: Workload, config, params: SimParams, states=None, sim_start=0):
    """Cheapest plan over the factor set with every batch on one configuration.

    Raises:
        Infeasible: no factor meets every deadline on this configuration.
    """
    level = next(i for i, c in enumerate(workload.configs) if c.id == config.id)
    best = None
    for f in params.bsf_set:
        st = initial_states(workload, states)
        try:
            sizes = batch_sizes_for(workload, f, params, st)
        except InfeasibleBatch:
            continue
        pl = _Planner(workload, params, f, sizes, st, sim_start)
        entries = []
        ok, end = pl.gen_batch_schedule(pl.fresh_states(), entries, [level], 0, sim_start)
        if not ok:
            continue
        sch = _package(entries[:end], workload, f, level, sim_start, sizes, pl)
        sch.timeline = release_idle(sch.entries, workload, params, sim_start)
        if best is None or _rank(sch) < _rank(best):
            best = sch
    if best is None:
        raise Infeasible(f"config {config.id} cannot meet every deadline")
    return best


def fixed_config_costs(workload: Workload, params: SimParams):
    """{config id: cost or None} for every configuration."""
    out = {}
    for c in workload.configs:
        try:
            out[c.id] = fixed_config_schedule(workload, c, params).total_cost
        except Infeasible:
            out[c.id] = None
    return out


@dataclass(frozen=True)
class AutoscaleRules:
    """Threshold rules on a headroom percentage, one node per evaluation period.

    Headroom stands in for free cluster memory: 100 * (1 - backlog / period),
    where backlog is the work already waiting, in seconds at the current size.
    """
    scale_out_below_pct: float = 15.0
    scale_in_above_pct: float = 75.0
    min_nodes: int = 2
    max_nodes: int = 30
    evaluation_period_s: float = 300.0

    def __post_init__(self):
        if not (0 < self.scale_out_below_pct < self.scale_in_above_pct < 100):
            raise ValueError("need 0 < scale_out_below_pct < scale_in_above_pct < 100")
        if not (1 <= self.min_nodes <= self.max_nodes):
            raise ValueError("need 1 <= min_nodes <= max_nodes")
        if self.evaluation_period_s <= 0:
            raise ValueError("evaluation period must be > 0")


@dataclass
class _Pick:
    qid: str
    slack: int


def _close(events, scen, changes, end, outcomes, strategy):
    stop = end + scen.release_delay_ms
    events.append(Event(end, "ResizeRequest", nodes=0, detail=f"release ready {stop}"))
    pts = sorted(((t, n) for t, n in changes if t < stop), key=lambda c: c[0]) + [(stop, 0)]
    tl = NodeTimeline.from_steps(pts)
    events = events + _node_events(tl)
    return ExecutionTrace(events=_sorted(events), node_timeline=tl, total_cost=schedule_cost(tl, scen.prices),
                          outcomes=outcomes, strategy=strategy)


def _lives(scen):
    w = scen.workload
    return {q.query_id: _Live(q, scen.actual[q.input_stream], w.profiles[q.input_stream]) for q in w.queries}


def naive_llf_run(scen: ScenarioConfig, config) -> ExecutionTrace:
    """Fixed cluster, no batch sizing: each dispatch takes every tuple that has arrived."""
    n = config.worker_nodes
    w = scen.workload
    rng = random.Random(scen.seed)
    events, outcomes = [], {}
    live = _lives(scen)
    for lv in live.values():
        if lv.done:
            _finish(events, outcomes, lv, scen.start_ms)
    now = scen.start_ms
    while any(not lv.done for lv in live.values()):
        ready, wake = [], math.inf
        for qid in sorted(live):
            lv = live[qid]
            if lv.done:
                continue
            g = lv.actual.granule
            avail = lv.available(now)
            closed = now >= lv.spec.wind_end
            if avail > 0 and (closed or (avail >= g and avail < lv.remaining)):
                ready.append(lv)
                continue
            # next moment something new can be dispatched
            k = min(lv.consumed + avail + g, lv.actual_total)
            t = lv.arrival(k)
            if k == lv.actual_total:
                t = max(t, lv.spec.wind_end)
            wake = min(wake, max(t, now + 1))
        if not ready:
            now = wake
            continue
        picks = [_Pick(lv.spec.query_id, slack_of(lv, now, n, w.models_of(lv.spec))) for lv in ready]
        lv = live[select_next_batch(picks, now)]
        take = lv.available(now)
        final = now >= lv.spec.wind_end and take == lv.remaining
        end = _run_batch(events, lv, n, take, final, False, now, w.models_of(lv.spec), rng, scen.noise_pct)
        if final:
            _finish(events, outcomes, lv, end)
        now = end
    return _close(events, scen, [(scen.start_ms, n)], now, outcomes, f"naive-llf:{config.id}")


def _autoscale_sizes(scen):
    try:
        return choose_schedule(scen.workload, scen.sim_params()).batch_sizes
    except (Infeasible, InfeasibleBatch):
        return batch_sizes_for(scen.workload, scen.params.bsf_set[0], scen.params)


def autoscale_run(scen: ScenarioConfig, rules: AutoscaleRules = AutoscaleRules()) -> ExecutionTrace:
    """Deadline-blind threshold autoscaling with the elastic plan's batch sizes."""
    w = scen.workload
    rng = random.Random(scen.seed)
    sizes = _autoscale_sizes(scen)
    events, outcomes = [], {}
    live = _lives(scen)
    for lv in live.values():
        if lv.done:
            _finish(events, outcomes, lv, scen.start_ms)
    P = int(rules.evaluation_period_s * 1000)
    changes = [(scen.start_ms, rules.min_nodes)]
    pending = None  # (ready_ms, target) of the one resize in flight

    def level(t):
        lvl = 0
        for ct, k in sorted(changes, key=lambda c: c[0]):
            if ct > t:
                break
            lvl = k
        return lvl

    def next_ready(lv):
        size = sizes[lv.spec.query_id]
        if lv.remaining > size:
            return lv.arrival(lv.consumed + size), size, False
        return max(lv.spec.wind_end, lv.arrival(lv.actual_total)), lv.remaining, True

    busy_until = scen.start_ms
    next_eval = scen.start_ms + P
    while any(not lv.done for lv in live.values()):
        todo = {qid: next_ready(lv) for qid, lv in live.items() if not lv.done}
        T = max(busy_until, min(r for r, _, _ in todo.values()))
        if pending is not None and pending[0] <= min(T, next_eval):
            pending = None
        if next_eval <= T:
            t = next_eval
            nodes = level(t)
            backlog = max(0, busy_until - t)
            for qid, (r, size, _) in todo.items():
                if r <= t:
                    backlog += _proc_ms(w.models_of(live[qid].spec), nodes, size)
            headroom = 100.0 * (1.0 - backlog / P)
            if pending is None:
                if headroom < rules.scale_out_below_pct and nodes < rules.max_nodes:
                    pending = (t + scen.lead_ms, nodes + 1)
                    events.append(Event(t, "ResizeRequest", nodes=nodes + 1, detail=f"acquire ready {pending[0]}"))
                    changes.append(pending)
                elif headroom > rules.scale_in_above_pct and nodes > rules.min_nodes:
                    eff = max(t + scen.release_delay_ms, busy_until)
                    pending = (eff, nodes - 1)
                    events.append(Event(t, "ResizeRequest", nodes=nodes - 1, detail=f"release ready {eff}"))
                    changes.append(pending)
            next_eval += P
            continue
        ready = [qid for qid, (r, _, _) in todo.items() if r <= T]
        nodes = level(T)
        if pending is not None and pending[1] < nodes:
            nodes = pending[1]  # a release is on its way; plan with what will be left
        picks = [_Pick(q, slack_of(live[q], T, nodes, w.models_of(live[q].spec), sizes[q])) for q in sorted(ready)]
        qid = select_next_batch(picks, T)
        _, take, final = todo[qid]
        lv = live[qid]
        end = _run_batch(events, lv, nodes, take, final, False, T, w.models_of(lv.spec), rng, scen.noise_pct)
        if final:
            _finish(events, outcomes, lv, end)
        busy_until = end
    end = busy_until
    changes = [(t, k) for t, k in changes if t <= end]
    return _close(events, scen, changes, end, outcomes, "autoscale")
