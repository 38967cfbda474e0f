"""Discrete-event replay of a plan against actual arrivals on an elastic cluster.

The elastic runtime follows the dispatch order of the current plan, checks
arrival rates at fixed window boundaries and re-plans from the live query
state when the planning assumptions break or the query set changes.
"""
from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, replace

from .cost_model import NodeTimeline, PriceTable, estimate_agg_duration, estimate_duration, schedule_cost, to_ms
from .errors import Infeasible, InfeasibleBatch, ScenarioInfeasible
from .simulator import SimParams, Workload, choose_schedule, gen_schedule, max_supported_rate
from .workload import InputProfile, QuerySimState, QuerySpec, cumulative_tuples, estimate_rate, input_time, make_state

EVENT_KINDS = (
    "BatchStart", "BatchEnd", "FinalAgg", "PartialAgg", "ResizeRequest", "NodesReady",
    "NodesReleased", "ReSimulation", "RateEstimate", "DeadlineMet", "DeadlineMiss",
)
# deadlines handed to the best-effort fallback planner
_NO_DEADLINE = 1 << 60


@dataclass(frozen=True)
class Event:
    time_ms: int
    kind: str
    query_id: str = ""
    batch_no: int = 0
    nodes: int = 0
    detail: str = ""


@dataclass(frozen=True)
class QueryArrival:
    time_ms: int
    action: str  # "add" or "remove"
    query: QuerySpec | None = None
    query_id: str = ""

    def __post_init__(self):
        if self.action not in ("add", "remove"):
            raise ValueError("query arrival action must be add or remove")
        if self.action == "add" and self.query is None:
            raise ValueError("add needs a query")


@dataclass(frozen=True)
class ResizeRequest:
    issue_ms: int
    target: int
    ready_ms: int
    kind: str  # "acquire" or "release"


@dataclass
class ClusterState:
    current_nodes: int = 2
    requested_nodes: int = 2
    pending: list = field(default_factory=list)
    busy_until: int = 0
    lead_ms: int = 360_000
    release_delay_ms: int = 90_000
    release_idle_ms: int = 720_000
    min_nodes: int = 2

    def __post_init__(self):
        if self.release_idle_ms < 2 * self.lead_ms:
            raise ValueError("release idle threshold must be at least twice the provisioning lead")
        if self.min_nodes < 0 or self.current_nodes < self.min_nodes:
            raise ValueError("node count below the mandatory floor")


@dataclass
class ScenarioConfig:
    workload: Workload
    prices: PriceTable
    params: SimParams = field(default_factory=SimParams)
    actual_profiles: dict | None = None
    rate_policy: str = "pessimistic"
    rate_window_ms: int = 180_000
    rate_deviation_pct: float = 2.0
    query_arrivals: tuple = ()
    noise_pct: float = 0.0
    seed: int = 0
    lead_ms: int = 360_000
    release_delay_ms: int = 90_000
    release_idle_ms: int = 720_000
    min_nodes: int = 2
    start_ms: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.rate_policy not in ("optimistic", "pessimistic"):
            raise ValueError("rate_policy must be optimistic or pessimistic")
        if self.rate_window_ms <= 0:
            raise ValueError("rate window must be > 0")
        if not (0 <= self.noise_pct < 100):
            raise ValueError("noise_pct must be in [0, 100)")
        if self.actual_profiles is not None:
            if set(self.actual_profiles) != set(self.workload.profiles):
                raise ValueError("actual and nominal streams must share stream ids")

    def sim_params(self):
        """Planner parameters with this scenario's node floor and idle-release timing."""
        return replace(self.params, lead_ms=self.lead_ms, release_idle_ms=self.release_idle_ms,
                       floor_nodes=self.min_nodes)

    @property
    def actual(self):
        return self.actual_profiles if self.actual_profiles is not None else self.workload.profiles

    def cluster(self, nodes=None):
        return ClusterState(
            current_nodes=self.min_nodes if nodes is None else nodes,
            requested_nodes=self.min_nodes if nodes is None else nodes,
            lead_ms=self.lead_ms, release_delay_ms=self.release_delay_ms,
            release_idle_ms=self.release_idle_ms, min_nodes=self.min_nodes,
        )


@dataclass
class ExecutionTrace:
    events: list
    node_timeline: NodeTimeline
    total_cost: float
    outcomes: dict
    plans: list = field(default_factory=list)
    sim_wall_s: float = 0.0
    strategy: str = "elastic"

    @property
    def misses(self):
        return sum(1 for _, met in self.outcomes.values() if not met)

    @property
    def max_nodes(self):
        return self.node_timeline.max_nodes()

    @property
    def resim_count(self):
        return sum(1 for e in self.events if e.kind == "ReSimulation")

    def of_kind(self, kind):
        return [e for e in self.events if e.kind == kind]

    def summary(self):
        return {
            "strategy": self.strategy,
            "total_cost": round(self.total_cost, 4),
            "misses": self.misses,
            "max_nodes": self.max_nodes,
            "resim_count": self.resim_count,
            "sim_wall_s": round(self.sim_wall_s, 6),
            "queries": {q: {"completion_ms": t, "met": met} for q, (t, met) in sorted(self.outcomes.items())},
        }


# ---------------------------------------------------------------- resizing

def plan_resize_requests(timeline: NodeTimeline, cluster: ClusterState, now=0):
    """Resize requests that realize `timeline` from `now` on.

    Upward steps are requested one provisioning lead early (never before
    now). A downward step is only released if the lower level holds for at
    least the idle threshold; the final step to zero always releases.
    """
    pts = [(now, timeline.at(now))] + [(t, n) for t, n in timeline.points if t > now]
    held = cluster.requested_nodes
    floor = cluster.min_nodes
    out = []
    for i, (t, n) in enumerate(pts):
        last = i == len(pts) - 1
        if last and n == 0:
            if held > 0:
                out.append(ResizeRequest(t, 0, t + cluster.release_delay_ms, "release"))
                held = 0
            continue
        target = max(n, floor)
        if target > held:
            issue = max(now, t - cluster.lead_ms)
            out.append(ResizeRequest(issue, target, issue + cluster.lead_ms, "acquire"))
            held = target
        elif target < held:
            # how long the timeline stays at or below `target`
            span = math.inf
            for t2, n2 in pts[i + 1:]:
                if n2 > target or n2 == 0:
                    span = t2 - t
                    break
            if span >= cluster.release_idle_ms:
                out.append(ResizeRequest(t, target, t + cluster.release_delay_ms, "release"))
                held = target
    return out


def select_next_batch(ready, now=None):
    """Least slack first; ties go to the smaller query id. None when nothing is ready."""
    if not ready:
        return None
    return min(ready, key=lambda s: (s.slack, s.qid)).qid


# ---------------------------------------------------------------- runtime plumbing

class _Cluster:
    """Node level changes over time plus the requests behind them."""

    def __init__(self, scen: ScenarioConfig, start, nodes, events):
        self.s = scen
        self.changes = [(start, nodes)]  # (effective_ms, level), in issue order
        self.planned = []  # ResizeRequest not yet issued
        self.events = events
        self.running = None  # (start, end, nodes) of the batch in flight

    @staticmethod
    def _level(changes, t):
        lvl = 0
        for ct, n in sorted(changes, key=lambda c: c[0]):
            if ct > t:
                break
            lvl = n
        return lvl

    def level(self, t):
        return self._level(self.changes, t)

    def committed(self):
        return max(self.changes, key=lambda c: c[0])[1]

    def issue(self, r: ResizeRequest):
        ready = r.ready_ms
        if r.kind == "release" and self.running is not None:
            b0, b1, n = self.running
            if b0 <= ready < b1 and r.target < n:
                ready = b1  # never cut nodes from under a running batch
        self.events.append(Event(r.issue_ms, "ResizeRequest", nodes=r.target, detail=f"{r.kind} ready {ready}"))
        self.changes.append((ready, r.target))

    def adopt(self, timeline, now):
        """Replace not-yet-issued requests with those for a new timeline."""
        cs = ClusterState(current_nodes=max(self.level(now), self.s.min_nodes),
                          requested_nodes=self.committed(), lead_ms=self.s.lead_ms,
                          release_delay_ms=self.s.release_delay_ms,
                          release_idle_ms=self.s.release_idle_ms, min_nodes=self.s.min_nodes)
        reqs = plan_resize_requests(timeline, cs, now)
        # the final release is decided when the run ends
        self.planned = [r for r in reqs if r.target > 0]

    def flush(self, t):
        """Issue every planned request whose issue time has come."""
        due = [r for r in self.planned if r.issue_ms <= t]
        self.planned = [r for r in self.planned if r.issue_ms > t]
        for r in sorted(due, key=lambda r: r.issue_ms):
            self.issue(r)

    def ready_at(self, n, t):
        """Earliest time >= t holding at least n nodes, counting planned requests."""
        ch = self.changes + [(r.ready_ms, r.target) for r in self.planned]
        if self._level(ch, t) >= n:
            return t
        for ct, _ in sorted(ch, key=lambda c: c[0]):
            if ct > t and self._level(ch, ct) >= n:
                return ct
        return None

    def timeline(self, end):
        pts = sorted(((t, n) for t, n in self.changes if t < end), key=lambda c: c[0])
        pts.append((end, 0))
        return NodeTimeline.from_steps(pts)


def _node_events(timeline):
    out = []
    prev = 0
    for t, n in timeline.points:
        out.append(Event(t, "NodesReady" if n > prev else "NodesReleased", nodes=n))
        prev = n
    return out


def _noise(rng, pct):
    if pct <= 0:
        return 1.0
    lo, hi = math.log(1 - pct / 100.0), math.log(1 + pct / 100.0)
    return math.exp(rng.uniform(lo, hi))


def _proc_ms(models, nodes, tuples):
    return to_ms(estimate_duration(models.proc, nodes, tuples)) if tuples > 0 else 0


def _agg_ms(models, nodes, k):
    return to_ms(estimate_agg_duration(models.agg, nodes, k)) if k > 1 else 0


class _Live:
    """Actual progress of one query."""

    def __init__(self, spec, actual_profile, nominal_profile):
        self.spec = spec
        self.actual = actual_profile
        st = make_state(spec, actual_profile)
        self.offset = st.offset
        self.actual_total = st.total
        self.nominal_total = make_state(spec, nominal_profile).total
        self.consumed = 0
        self.batches = 0
        self.folds = 0
        self.unfolded = 0
        self.done = self.actual_total == 0

    def arrival(self, k):
        return input_time(self.actual, self.offset + k)

    def available(self, t):
        t = min(t, self.spec.wind_end)
        return cumulative_tuples(self.actual, t) - self.offset - self.consumed

    @property
    def remaining(self):
        return self.actual_total - self.consumed


def _finish(events, outcomes, live, t):
    met = t <= live.spec.deadline
    outcomes[live.spec.query_id] = (t, met)
    events.append(Event(t, "DeadlineMet" if met else "DeadlineMiss", live.spec.query_id, live.batches,
                        detail=f"deadline {live.spec.deadline}"))


def _run_batch(events, live: _Live, nodes, take, final, fold, start, models, rng, noise_pct, batch_no=None):
    """Book one batch on the trace; returns its end time."""
    q = live.spec.query_id
    k = live.batches + 1 if batch_no is None else batch_no
    dur = _proc_ms(models, nodes, take)
    pat = fat = 0
    live.consumed += take
    live.batches += 1
    if fold and not final:
        pat = _agg_ms(models, nodes, live.unfolded + 1)
        live.folds += 1
        live.unfolded = 0
    else:
        live.unfolded += 1
    if final:
        fat = _agg_ms(models, nodes, live.folds + live.unfolded)
    f = _noise(rng, noise_pct)
    dur = int(round(dur * f)) if f != 1.0 else dur
    pat = int(round(pat * f)) if f != 1.0 else pat
    fat = int(round(fat * f)) if f != 1.0 else fat
    events.append(Event(start, "BatchStart", q, k, nodes, f"tuples {take}"))
    t = start + dur
    events.append(Event(t, "BatchEnd", q, k, nodes, f"tuples {take}"))
    if pat:
        t += pat
        events.append(Event(t, "PartialAgg", q, k, nodes))
    if final:
        t += fat
        events.append(Event(t, "FinalAgg", q, k, nodes, f"batches {live.folds + live.unfolded}"))
        live.done = True
    return t


# at equal times, things that finish come before things that start
_SAME_TIME_ORDER = {k: i for i, k in enumerate((
    "BatchEnd", "PartialAgg", "FinalAgg", "DeadlineMet", "DeadlineMiss", "NodesReleased", "RateEstimate",
    "ReSimulation", "ResizeRequest", "NodesReady", "BatchStart"))}


def _sorted(events):
    return sorted(events, key=lambda e: (e.time_ms, _SAME_TIME_ORDER.get(e.kind, 99)))


# ---------------------------------------------------------------- elastic runtime

class _Elastic:
    def __init__(self, scen: ScenarioConfig):
        self.s = scen
        self.p = scen.sim_params()
        self.events = []
        self.outcomes = {}
        self.rng = random.Random(scen.seed)
        self.queries = {q.query_id: q for q in scen.workload.queries}
        self.planning = dict(scen.workload.profiles)
        self.live = {q.query_id: _Live(q, scen.actual[q.input_stream], self.planning[q.input_stream])
                     for q in scen.workload.queries}
        self.plans = []
        self.wall = 0.0
        self.msr = 1.0
        self.queue = []
        self.busy_until = scen.start_ms

    # planning -------------------------------------------------------
    def _workload(self):
        w = self.s.workload
        qs = tuple(q for qid, q in self.queries.items() if not self.live[qid].done)
        return replace(w, queries=qs, profiles=dict(self.planning))

    def _states(self, w, now):
        out = []
        for q in w.queries:
            lv = self.live[q.query_id]
            total = make_state(q, w.profile_of(q)).total
            # never plan for fewer tuples than have already shown up
            seen = lv.consumed + lv.available(now)
            st = QuerySimState(spec=q, total=max(total, seen),
                               offset=lv.offset, consumed=lv.consumed, batches_done=lv.batches,
                               folds=lv.folds, unfolded=lv.unfolded)
            out.append(st)
        return out

    def _catch_up(self, now):
        # a planning profile that trails the observed count would ask for tuples it never delivers
        for sid, pl in self.planning.items():
            act = self.s.actual[sid]
            if cumulative_tuples(act, now) > cumulative_tuples(pl, now):
                self.planning[sid] = replace(act.with_rate_from(now, pl.rate_at(now)), end_ms=max(now, pl.end_ms))

    def plan(self, now, fresh=False, reason="", at=None):
        if not fresh:
            self._catch_up(now)
        w = self._workload()
        t0 = time.perf_counter()
        if fresh:
            sch = choose_schedule(w, self.p, sim_start=now)
            states = None
        else:
            states = self._states(w, now)
            avail = (self.cluster.level(now), now + self.s.lead_ms)
            try:
                sch = choose_schedule(w, self.p, sim_start=now, states=states, avail=avail)
            except (Infeasible, InfeasibleBatch):
                sch = self._best_effort(w, now, states)
                reason += "; infeasible, best effort"
        if self.s.rate_policy == "pessimistic" and sch.entries:
            sch.max_supported_rate = max_supported_rate(w, sch, self.p, states=states)
        self.wall += time.perf_counter() - t0
        self.msr = sch.max_supported_rate
        self.plans.append(sch)
        self.queue = list(sch.entries)
        if not fresh:
            at = now if at is None else at
            self.events.append(Event(at, "ReSimulation", detail=f"{reason}; plan from {now}; cost {sch.total_cost:.4f}"))
        return sch

    def _best_effort(self, w, now, states):
        # keep running on the largest configuration and record the misses
        loose = replace(w, queries=tuple(replace(q, deadline=_NO_DEADLINE) for q in w.queries))
        st = [replace(s, spec=replace(s.spec, deadline=_NO_DEADLINE)) for s in states]
        return gen_schedule(len(w.configs) - 1, self.p.bsf_set[0], loose, self.p, now, states=st)

    # rate checks ----------------------------------------------------
    def check_rates(self, t):
        W = self.s.rate_window_ms
        triggered = []
        streams = {}
        for qid, q in self.queries.items():
            lv = self.live[qid]
            if lv.done or q.wind_end <= t - W or q.wind_start > t:
                continue
            streams.setdefault(q.input_stream, []).append(qid)
        for sid in sorted(streams):
            act = self.s.actual[sid]
            plan = self.planning[sid]
            n_act = cumulative_tuples(act, t) - cumulative_tuples(act, t - W)
            n_plan = cumulative_tuples(plan, t) - cumulative_tuples(plan, t - W)
            est = estimate_rate([(t, n_act)], t, W)
            ratio = (n_act / n_plan) if n_plan > 0 else (math.inf if n_act > 0 else 1.0)
            self.events.append(Event(t, "RateEstimate", detail=f"{sid} {est:.4f}/s ratio {ratio:.4f}"))
            if self.s.rate_policy != "pessimistic":
                continue
            if ratio > 1 + self.s.rate_deviation_pct / 100.0 and ratio > self.msr:
                end = max(t, plan.end_ms)
                self.planning[sid] = replace(act.with_rate_from(t, est), end_ms=end)
                triggered.append(f"{sid} rate {est:.4f}/s x{ratio:.3f}")
        return triggered

    # dispatch -------------------------------------------------------
    def _next_entry(self):
        while self.queue:
            e = self.queue[0]
            lv = self.live.get(e.query_id)
            if lv is None or lv.done or e.query_id not in self.queries:
                self.queue.pop(0)
                continue
            return e
        return None

    def _shape(self, e, lv):
        """(tuples, final, ready_ms) for the next batch of lv under plan entry e."""
        rest = [x for x in self.queue[1:] if x.query_id == e.query_id]
        if e.final or not rest or lv.remaining <= e.tuples:
            take = lv.remaining
            ready = max(lv.spec.wind_end, lv.arrival(lv.actual_total))
            return take, True, ready
        return e.tuples, False, lv.arrival(lv.consumed + e.tuples)

    def start_time(self, e):
        lv = self.live[e.query_id]
        _, _, ready = self._shape(e, lv)
        t = max(self.busy_until, ready, self.s.start_ms)
        got = self.cluster.ready_at(e.req_nodes, t)
        return t + self.s.lead_ms if got is None else got

    def dispatch(self, e, t):
        lv = self.live[e.query_id]
        take, final, _ = self._shape(e, lv)
        self.cluster.flush(t)
        if self.cluster.level(t) < e.req_nodes:
            # nothing requested brings enough nodes: ask now, start when they land
            got = self.cluster.ready_at(e.req_nodes, t)
            if got is None:
                self.cluster.issue(ResizeRequest(t, e.req_nodes, t + self.s.lead_ms, "acquire"))
                got = t + self.s.lead_ms
            t = got
            self.cluster.flush(t)
        self.queue.pop(0)
        models = self.s.workload.models_of(lv.spec)
        dur = _proc_ms(models, e.req_nodes, take)
        self.cluster.running = (t, t + dur, e.req_nodes)
        end = _run_batch(self.events, lv, e.req_nodes, take, final, e.partial_agg and not final, t,
                         models, self.rng, self.s.noise_pct)
        self.cluster.running = (t, end, e.req_nodes)
        self._hold(t, end, e.req_nodes)
        self.busy_until = end
        if final:
            _finish(self.events, self.outcomes, lv, end)

    def _hold(self, t0, t1, n):
        ch = self.cluster.changes
        for i, (ct, lvl) in enumerate(ch):
            if t0 < ct < t1 and lvl < n:
                ch[i] = (t1, lvl)

    # main loop ------------------------------------------------------
    def run(self):
        s = self.s
        start = s.start_ms
        try:
            sch = self.plan(start, fresh=True)
        except (Infeasible, InfeasibleBatch) as exc:
            raise ScenarioInfeasible(str(exc)) from exc
        # nodes needed within the first lead time are on hand at the start
        tl = sch.timeline
        horizon = [n for t, n in tl.points if t <= start + s.lead_ms]
        init = max([tl.at(start)] + horizon + [s.min_nodes])
        self.cluster = _Cluster(s, start, init, self.events)
        self.cluster.adopt(tl, start)
        for lv in self.live.values():
            if lv.done:
                _finish(self.events, self.outcomes, lv, start)
        arrivals = sorted(s.query_arrivals, key=lambda a: a.time_ms)
        W = s.rate_window_ms
        next_check = start + W
        end = start
        while True:
            e = self._next_entry()
            active = any(not lv.done for qid, lv in self.live.items() if qid in self.queries)
            if e is None and not arrivals:
                break
            T = self.start_time(e) if e is not None else math.inf
            tc = arrivals[0].time_ms if arrivals else math.inf
            if active:
                tc = min(tc, next_check)
            if e is None and tc == math.inf:
                break
            if tc <= T:
                self.cluster.flush(tc)
                reasons = []
                if arrivals and arrivals[0].time_ms == tc:
                    while arrivals and arrivals[0].time_ms == tc:
                        reasons.append(self._apply_arrival(arrivals.pop(0)))
                if active and next_check == tc:
                    reasons += self.check_rates(tc)
                    next_check += W
                if reasons:
                    now = max(tc, self.busy_until)
                    if any(not lv.done for qid, lv in self.live.items() if qid in self.queries):
                        sch = self.plan(now, reason=", ".join(reasons), at=tc)
                        self.cluster.adopt(sch.timeline, tc)
                    else:
                        self.queue = []
                end = max(end, tc)
                continue
            self.dispatch(e, T)
            end = max(end, self.busy_until)
        end = max(end, self.busy_until)
        self.cluster.flush(end)
        self.cluster.changes = [(t, n) for t, n in self.cluster.changes if t <= end]
        stop = end + s.release_delay_ms
        self.events.append(Event(end, "ResizeRequest", nodes=0, detail=f"release ready {stop}"))
        tl = self.cluster.timeline(stop)
        self.events += _node_events(tl)
        return ExecutionTrace(
            events=_sorted(self.events), node_timeline=tl, total_cost=schedule_cost(tl, s.prices),
            outcomes=self.outcomes, plans=self.plans, sim_wall_s=self.wall, strategy="elastic",
        )

    def _apply_arrival(self, a: QueryArrival):
        if a.action == "add":
            q = a.query
            if q.input_stream not in self.planning:
                raise ValueError(f"query {q.query_id} reads unknown stream {q.input_stream}")
            self.queries[q.query_id] = q
            self.live[q.query_id] = _Live(q, self.s.actual[q.input_stream], self.planning[q.input_stream])
            if self.live[q.query_id].done:
                _finish(self.events, self.outcomes, self.live[q.query_id], a.time_ms)
            return f"query {q.query_id} added"
        self.queries.pop(a.query_id, None)
        return f"query {a.query_id} removed"


def run_scenario(scenario: ScenarioConfig) -> ExecutionTrace:
    """Replay the scenario with the elastic planner in the loop.

    Raises:
        ScenarioInfeasible: the initial plan on nominal profiles fails.
    """
    return _Elastic(scenario).run()


# ---------------------------------------------------------------- shared by baselines

def slack_of(live: _Live, now, nodes, models, batch_tuples=None):
    """Deadline minus now minus the work still owed, at `nodes` nodes."""
    pend = max(live.nominal_total, live.actual_total) - live.consumed
    pend = max(pend, 0)
    if batch_tuples is None or batch_tuples >= pend:
        work = _proc_ms(models, nodes, pend)
        k = live.folds + live.unfolded + 1
    else:
        full, rem = divmod(pend, batch_tuples)
        work = full * _proc_ms(models, nodes, batch_tuples) + _proc_ms(models, nodes, rem)
        k = live.folds + live.unfolded + full + (1 if rem else 0)
    return live.spec.deadline - now - work - _agg_ms(models, nodes, k)
