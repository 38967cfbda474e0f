"""Schedule generation for batched window queries on an elastic cluster.

The planner simulates least-laxity-first batch dispatch on one shared
cluster. When a batch would miss its query's deadline it backtracks and
hands larger configurations to earlier batches, then to the whole tail
at the next configuration. A grid over (initial config, batch size
factor) picks the cheapest feasible plan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

from .cost_model import (
    ClusterConfig,
    NodeTimeline,
    batch_cost_ms,
    estimate_agg_duration,
    estimate_duration,
    estimate_tuples,
    to_ms,
)
from .errors import Infeasible, InfeasibleBatch, NoFeasibleSchedule
from .workload import InputProfile, QuerySimState, QuerySpec, input_time, make_state, next_brt

MAX_BATCHES = 10_000


@dataclass(frozen=True)
class QueryModels:
    proc: object
    agg: object


@dataclass(frozen=True)
class SimParams:
    c_max: float = math.inf
    bsf_set: tuple = (1, 2, 4, 8, 16, 32)
    step_k: int = 1
    max_nodes_cap: int = 1 << 30
    partial_agg_fraction: float | None = None
    reset_earlier: bool = True
    dispatch: str = "llf"
    lead_ms: int = 360_000
    release_idle_ms: int = 720_000
    floor_nodes: int = 2
    msr_step: float = 0.10
    msr_ceiling: float = 16.0

    def __post_init__(self):
        if self.c_max <= 0:
            raise ValueError("c_max must be > 0")
        if self.step_k < 1:
            raise ValueError("step_k must be >= 1")
        bs = tuple(self.bsf_set)
        if not bs or any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])) or bs[0] < 1:
            raise ValueError("bsf_set must be nonempty, increasing, >= 1")
        f = self.partial_agg_fraction
        if f is not None and not (0 < f <= 1):
            raise ValueError("partial_agg_fraction must be in (0, 1]")
        if self.dispatch not in ("llf", "edf"):
            raise ValueError("dispatch must be llf or edf")

    @property
    def aggregation_mode(self):
        return "final-only" if self.partial_agg_fraction is None else "partial"


@dataclass(frozen=True)
class Workload:
    queries: tuple
    profiles: dict
    models: dict
    configs: tuple

    def profile_of(self, q: QuerySpec) -> InputProfile:
        return self.profiles[q.input_stream]

    def models_of(self, q: QuerySpec) -> QueryModels:
        return self.models[q.model]

    def level_of_nodes(self, nodes):
        for i, c in enumerate(self.configs):
            if c.worker_nodes == nodes:
                return i
        raise KeyError(nodes)

    def scaled(self, factor):
        return replace(self, profiles={k: p.scaled(factor) for k, p in self.profiles.items()})


@dataclass
class BatchScheduleEntry:
    time: int
    query_id: str
    batch_no: int
    bst: int
    bet: int
    req_nodes: int
    pending: int
    tuples: int
    config_id: int
    bct: int = 0
    pat: int = 0
    fat: int = 0
    partial_agg: bool = False
    final: bool = False


@dataclass
class Schedule:
    entries: list
    timeline: NodeTimeline
    total_cost: float
    max_nodes: int
    batch_size_factor: int
    init_config: int
    sim_start: int
    batch_sizes: dict = field(default_factory=dict)
    max_supported_rate: float = 1.0
    stats: dict = field(default_factory=dict)

    def entries_of(self, qid):
        return [e for e in self.entries if e.query_id == qid]


# ---------------------------------------------------------------- durations

@lru_cache(maxsize=200_000)
def _bct_ms(proc, nodes, tuples):
    if tuples <= 0:
        return 0
    return to_ms(estimate_duration(proc, nodes, tuples))


@lru_cache(maxsize=50_000)
def _agg_ms(agg, nodes, items):
    if items <= 1:
        return 0
    return to_ms(estimate_agg_duration(agg, nodes, items))


def base_batch_size(total, proc, c1: ClusterConfig, c_max=math.inf) -> int:
    """Smallest batch size whose split cost stays within twice one big batch.

    Args:
        total: tuples in the query window.
        proc: processing model.
        c1: the smallest configuration.
        c_max: cap in seconds on any single batch duration.
    """
    if total < 1:
        raise ValueError("need at least one tuple")
    n = c1.worker_nodes

    def dur(x):
        return estimate_duration(proc, n, x)

    bound = 2.0 * dur(total)
    a = proc.per_tuple(n)
    b = proc.overhead(n)
    # ceil(N/x) * Dur(x) >= a*N + b*N/x, so nothing below x0 can satisfy the bound
    x0 = 1 if b <= 0 else max(1, int(math.floor(b * total / (a * total + 2 * b))))
    x = x0
    while x < total and math.ceil(total / x) * dur(x) > bound * (1 + 1e-12):
        x += 1
    if dur(x) >= c_max:
        lo = estimate_tuples(proc, n, c_max)
        while lo >= 1 and dur(lo) >= c_max:
            lo -= 1
        if lo < 1:
            raise InfeasibleBatch("a single tuple already exceeds the batch duration cap")
        x = min(x, lo)
    return x


def batch_sizes_for(workload: Workload, factor, params: SimParams, states=None):
    """Per-query batch size: factor x base size, rounded up to granules."""
    c1 = workload.configs[0]
    out = {}
    totals = {}
    if states is not None:
        totals = {s.qid: s.total for s in states}
    for q in workload.queries:
        prof = workload.profile_of(q)
        total = totals.get(q.query_id)
        if total is None:
            total = make_state(q, prof).total
        if total <= 0:
            out[q.query_id] = 1
            continue
        x = base_batch_size(total, workload.models_of(q).proc, c1, params.c_max)
        size = factor * x
        g = prof.granule
        size = -(-size // g) * g
        out[q.query_id] = max(1, size)
    return out


# ---------------------------------------------------------------- planner

class _Planner:
    def __init__(self, workload, params, factor, sizes, init_states, sim_start, avail=None):
        self.w = workload
        self.p = params
        self.factor = factor
        self.sizes = sizes
        self.init_states = init_states
        self.sim_start = sim_start
        # (nodes on hand, time extra nodes can be ready); None means no constraint
        self.avail = avail
        self.configs = workload.configs
        self._brt = {}
        self.gbs_calls = 0
        self.batches_simulated = 0
        self.fail_bst = None

    # state handling ------------------------------------------------------
    def fresh_states(self):
        out = []
        for s in self.init_states:
            c = replace(s, extra=dict(s.extra))
            c.batch_size = self.sizes[s.qid]
            c.extra["period"] = self._fold_period(c)
            out.append(c)
        return out

    def _fold_period(self, s):
        f = self.p.partial_agg_fraction
        if f is None:
            return 0
        planned = s.batches_done + -(-s.pending // s.batch_size) if s.pending > 0 else s.batches_done
        period = int(math.ceil(f * planned))
        return period if period >= 2 else 0

    def restore(self, entries, idx):
        """Query states and clock as they stand just before entries[idx]."""
        states = {s.qid: s for s in self.fresh_states()}
        sim_time = self.sim_start if idx == 0 else entries[idx - 1].bet
        for e in entries[:idx]:
            s = states.get(e.query_id)
            if s is None:
                continue
            self._apply(s, e)
            if e.final:
                del states[e.query_id]
        order = [s.qid for s in self.init_states]
        return [states[q] for q in order if q in states], sim_time

    @staticmethod
    def _apply(s, e):
        s.consumed += e.tuples
        s.batches_done += 1
        if e.partial_agg:
            s.folds += 1
            s.unfolded = 0
        else:
            s.unfolded += 1

    # per-query quantities ----------------------------------------------
    def brt(self, s):
        key = (s.qid, s.consumed, s.batch_size)
        v = self._brt.get(key)
        if v is None:
            v = next_brt(s, self.w.profile_of(s.spec))
            self._brt[key] = v
        return v

    def remaining_work(self, s, nodes):
        """Sum of batch times, partial folds and final aggregation still owed."""
        m = self.w.models_of(s.spec)
        bs = s.batch_size
        pend = s.pending
        full, rem = divmod(pend, bs)
        work = full * _bct_ms(m.proc, nodes, bs) + (_bct_ms(m.proc, nodes, rem) if rem else 0)
        r = full + (1 if rem else 0)
        bd = s.batches_done
        P = s.extra.get("period", 0)
        folds = 0
        unfolded_end = s.unfolded + r
        if P:
            last = bd + r - 1
            k1 = (bd // P + 1) * P
            if k1 <= last:
                folds = last // P - bd // P
                work += _agg_ms(m.agg, nodes, s.unfolded + (k1 - bd))
                work += (folds - 1) * _agg_ms(m.agg, nodes, P)
                unfolded_end = bd + r - (last // P) * P
        work += _agg_ms(m.agg, nodes, s.folds + folds + unfolded_end)
        return work

    def nodes_for(self, req, idx):
        level = req[idx] if idx < len(req) else req[-1]
        return level, self.configs[level].worker_nodes

    # one forward pass ---------------------------------------------------
    def gen_batch_schedule(self, states, entries, req, idx, sim_time):
        """Simulate forward from entries[idx]; returns (ok, end_idx)."""
        self.gbs_calls += 1
        active = list(states)
        edf = self.p.dispatch == "edf"
        while active:
            level, n = self.nodes_for(req, idx)
            for s in active:
                s.next_brt = self.brt(s)
                size = min(s.batch_size, s.pending)
                s.bct = _bct_ms(self.w.models_of(s.spec).proc, n, size)
                if sim_time >= s.next_brt:
                    s.bst, s.ready = sim_time, True
                else:
                    s.bst, s.ready = s.next_brt, False
                if self.avail is not None and n > self.avail[0] and s.bst < self.avail[1]:
                    s.bst = self.avail[1]
                s.slack = s.spec.deadline - s.bst - self.remaining_work(s, n)
            ready = [s for s in active if s.ready]
            if ready:
                if edf:
                    s = min(ready, key=lambda q: (q.spec.deadline, q.slack, q.qid))
                else:
                    s = min(ready, key=lambda q: (q.slack, q.qid))
            else:
                s = min(active, key=lambda q: (q.next_brt, q.slack, q.qid))
            if s.slack < 0:
                self.fail_bst = s.bst
                return False, idx
            self.batches_simulated += 1
            m = self.w.models_of(s.spec)
            size = min(s.batch_size, s.pending)
            final = size == s.pending
            P = s.extra.get("period", 0)
            k = s.batches_done + 1
            fold = bool(P) and not final and k % P == 0
            pat = _agg_ms(m.agg, n, s.unfolded + 1) if fold else 0
            bet = s.bst + s.bct + pat
            e = BatchScheduleEntry(
                time=sim_time, query_id=s.qid, batch_no=k, bst=s.bst, bet=bet,
                req_nodes=n, pending=s.pending - size, tuples=size,
                config_id=self.configs[level].id, bct=s.bct, pat=pat,
                partial_agg=fold, final=final,
            )
            self._apply(s, e)
            if final:
                e.fat = _agg_ms(m.agg, n, s.folds + s.unfolded)
                e.bet += e.fat
                active.remove(s)
            sim_time = e.bet
            if idx < len(entries):
                entries[idx] = e
            else:
                entries.append(e)
            if idx >= len(req):
                req.append(req[-1])
            idx += 1
        return True, idx

    # backtracking driver -----------------------------------------------
    def gen_schedule(self, init_level):
        cap = self.p.max_nodes_cap
        if self.configs[init_level].worker_nodes > cap:
            raise Infeasible("initial configuration exceeds the node cap")
        req = [init_level]
        entries = []
        level = init_level
        cursor = 0
        K = self.p.step_k
        while True:
            states, sim_time = self.restore(entries, cursor)
            ok, end = self.gen_batch_schedule(states, entries, req, cursor, sim_time)
            if ok:
                del entries[end:]
                return entries
            # the failing batch becomes the last slot; stale slots after it go
            del entries[end:]
            if end >= len(req):
                req.extend([req[-1]] * (end + 1 - len(req)))
            del req[end + 1:]
            new = cursor - K
            if new < 0 or self._gap_between(entries, new, cursor):
                new = len(req) - 1
                level += 1
                if level >= len(self.configs) or self.configs[level].worker_nodes > cap:
                    raise Infeasible("no feasible schedule within the node cap")
            cursor = new
            if self.p.reset_earlier and level > init_level + 1:
                for j in range(cursor):
                    req[j] = init_level
            req[cursor] = level

    def _gap_between(self, entries, lo, hi):
        """Idle time anywhere between slot lo and slot hi (exclusive walk range)."""
        for j in range(lo, min(hi, len(entries))):
            nxt = entries[j + 1].bst if j + 1 < len(entries) else self.fail_bst
            if nxt is not None and nxt - entries[j].bet > 0:
                return True
        return False


# ---------------------------------------------------------------- packaging

def plan_timeline(entries, sim_start, floor_nodes=None):
    """Node step function implied by a list of entries.

    Nodes go up at the start of a bigger batch and down at the end of a
    bigger one, so idle gaps hold the smaller of the two neighbours.
    """
    if not entries:
        return NodeTimeline(())
    steps = [(min(sim_start, entries[0].bst), entries[0].req_nodes)]
    for a, b in zip(entries, entries[1:]):
        if b.req_nodes > a.req_nodes:
            steps.append((b.bst, b.req_nodes))
        elif b.req_nodes < a.req_nodes:
            steps.append((a.bet, b.req_nodes))
    steps.append((entries[-1].bet, 0))
    return NodeTimeline.from_steps(steps)


def entries_cost(entries, workload) -> float:
    by_id = {c.id: c for c in workload.configs}
    return sum(batch_cost_ms(by_id[e.config_id], e.bet - e.bst) for e in entries)


def _package(entries, workload, factor, init_level, sim_start, sizes, planner):
    cfg = workload.configs[init_level]
    return Schedule(
        entries=list(entries),
        timeline=plan_timeline(entries, sim_start),
        total_cost=entries_cost(entries, workload),
        max_nodes=max((e.req_nodes for e in entries), default=cfg.worker_nodes),
        batch_size_factor=factor,
        init_config=cfg.id,
        sim_start=sim_start,
        batch_sizes=dict(sizes),
        stats={"gbs_calls": planner.gbs_calls, "batches_simulated": planner.batches_simulated},
    )


def initial_states(workload, states=None):
    if states is not None:
        return [replace(s, extra=dict(s.extra)) for s in states if s.pending > 0]
    out = []
    for q in workload.queries:
        s = make_state(q, workload.profile_of(q))
        if s.pending > 0:
            out.append(s)
    return out


def gen_batch_schedule(states, entries, req, workload, params, factor, sim_start, idx=0, sizes=None):
    """Single forward pass with node levels `req` (config indices).

    Returns (ok, end_idx). On failure entries past end_idx are not valid.
    """
    sizes = sizes or batch_sizes_for(workload, factor, params, states)
    pl = _Planner(workload, params, factor, sizes, list(states), sim_start)
    st = pl.fresh_states()
    return pl.gen_batch_schedule(st, entries, req, idx, sim_start)


def gen_schedule(init_level, factor, workload: Workload, params: SimParams, sim_start=0,
                 states=None, sizes=None, avail=None) -> Schedule:
    """Backtracking schedule generation at one (initial config, factor) cell.

    Raises:
        Infeasible: escalation ran past the largest allowed configuration.
    """
    st = initial_states(workload, states)
    sizes = sizes or batch_sizes_for(workload, factor, params, st)
    pl = _Planner(workload, params, factor, sizes, st, sim_start, avail)
    entries = pl.gen_schedule(init_level) if st else []
    return _package(entries, workload, factor, init_level, sim_start, sizes, pl)


def _gaps(entries, sim_start):
    out = []
    prev = sim_start
    for i, e in enumerate(entries):
        if e.bst > prev:
            out.append(i)
        prev = e.bet
    return out


def optimize_schedule(schedule: Schedule, workload: Workload, params: SimParams, states=None) -> Schedule:
    """Re-plan escalated segments from idle gaps and release idle task nodes."""
    init_level = next(i for i, c in enumerate(workload.configs) if c.id == schedule.init_config)
    init_nodes = workload.configs[init_level].worker_nodes
    best = list(schedule.entries)
    best_cost = schedule.total_cost
    st0 = initial_states(workload, states)
    improved = True
    while improved:
        improved = False
        for g in _gaps(best, schedule.sim_start):
            nxt = [j for j in _gaps(best, schedule.sim_start) if j > g]
            seg_end = nxt[0] if nxt else len(best)
            if max(e.req_nodes for e in best[g:seg_end]) <= init_nodes:
                continue
            pl = _Planner(workload, params, schedule.batch_size_factor, schedule.batch_sizes,
                          st0, schedule.sim_start)
            prefix_states, t0 = pl.restore(best, g)
            sub = _Planner(workload, params, schedule.batch_size_factor, schedule.batch_sizes,
                           prefix_states, t0)
            try:
                tail = sub.gen_schedule(init_level) if prefix_states else []
            except Infeasible:
                continue
            cand = best[:g] + tail
            cost = entries_cost(cand, workload)
            if cost < best_cost - 1e-12:
                best, best_cost = cand, cost
                improved = True
                break
    out = replace(schedule, entries=best, total_cost=best_cost,
                  max_nodes=max((e.req_nodes for e in best), default=schedule.max_nodes))
    out.timeline = release_idle(best, workload, params, schedule.sim_start)
    return out


def release_idle(entries, workload, params, sim_start):
    """Drop to the mandatory floor during long idle spans outside every window."""
    tl = plan_timeline(entries, sim_start)
    if not entries:
        return tl
    windows = sorted((q.wind_start, q.wind_end) for q in workload.queries)
    idle = []
    prev = sim_start
    for e in entries:
        if e.bst > prev:
            idle.append((prev, e.bst))
        prev = e.bet
    steps = list(tl.points)
    for a, b in idle:
        for lo, hi in _subtract(a, b, windows):
            if hi - lo < params.release_idle_ms:
                continue
            back = hi - params.lead_ms
            if back <= lo:
                continue
            level = tl.at(lo)
            floor = min(params.floor_nodes, level)
            if floor >= level:
                continue
            steps = _override(steps, lo, back, floor)
    return NodeTimeline.from_steps(steps)


def _subtract(a, b, windows):
    """Parts of [a, b) not covered by any window."""
    parts = [(a, b)]
    for w0, w1 in windows:
        nxt = []
        for lo, hi in parts:
            if w1 < lo or w0 >= hi:
                nxt.append((lo, hi))
                continue
            if w0 > lo:
                nxt.append((lo, w0))
            if w1 + 1 < hi:
                nxt.append((w1 + 1, hi))
        parts = nxt
    return parts


def _override(points, lo, hi, level):
    """Force the step function to `level` on [lo, hi)."""
    tl = NodeTimeline(tuple(points))
    after = tl.at(hi)
    kept = [(t, n) for t, n in points if t < lo or t > hi]
    kept += [(lo, level), (hi, after)]
    return sorted(kept)


def _rank(s: Schedule):
    return (round(s.total_cost, 9), s.max_nodes, len(s.entries), s.batch_size_factor, s.init_config)


def choose_schedule(workload: Workload, params: SimParams, sim_start=0, states=None, avail=None,
                    configs_allowed=None) -> Schedule:
    """Cheapest feasible plan over every (initial config, batch size factor) cell.

    Raises:
        NoFeasibleSchedule: no cell produced a feasible plan.
    """
    best = None
    levels = range(len(workload.configs)) if configs_allowed is None else configs_allowed
    for level in levels:
        for f in params.bsf_set:
            try:
                s = gen_schedule(level, f, workload, params, sim_start, states=states, avail=avail)
            except (Infeasible, InfeasibleBatch):
                continue
            s = optimize_schedule(s, workload, params, states=states)
            if best is None or _rank(s) < _rank(best):
                best = s
    if best is None:
        raise NoFeasibleSchedule("every (config, factor) cell is infeasible")
    return best


def max_supported_rate(workload: Workload, schedule: Schedule, params: SimParams, step_pct=None,
                       states=None) -> float:
    """Largest rate multiplier on the (1+s)^k lattice the chosen plan still absorbs.

    The initial config and batch sizes are pinned and escalation may not go
    above the plan's own peak node count.
    """
    s = params.msr_step if step_pct is None else step_pct
    if s <= 0:
        raise ValueError("step must be > 0")
    init_level = next(i for i, c in enumerate(workload.configs) if c.id == schedule.init_config)
    pinned = replace(params, max_nodes_cap=schedule.max_nodes)
    ceiling = params.msr_ceiling
    lattice = []
    m = 1.0 + s
    while m < ceiling - 1e-12:
        lattice.append(m)
        m *= 1.0 + s
    lattice.append(ceiling)
    good = 1.0
    for m in lattice:
        wl = workload.scaled(m)
        st = None
        if states is not None:
            st = [_rescaled_state(x, wl) for x in states]
        try:
            gen_schedule(init_level, schedule.batch_size_factor, wl, pinned, schedule.sim_start,
                         states=st, sizes=schedule.batch_sizes)
        except Infeasible:
            break
        good = m
    return round(good, 6)


def _rescaled_state(s, wl):
    prof = wl.profile_of(s.spec)
    fresh = make_state(s.spec, prof)
    c = replace(s, extra=dict(s.extra))
    c.total = max(s.consumed, fresh.total)
    return c


def single_query_cost_est(query: QuerySpec, config: ClusterConfig, models: QueryModels, profile: InputProfile):
    """Backward batch construction for one query on one configuration.

    Returns:
        (cost, [(start_ms, tuples), ...]) in forward time order.

    Raises:
        Infeasible: a batch would have to start before its tuples exist, or
        the batch count exceeds MAX_BATCHES.
    """
    st = make_state(query, profile)
    total = st.total
    if total <= 0:
        return 0.0, []
    n = config.worker_nodes
    proc, agg = models.proc, models.agg
    for num_batch in range(1, MAX_BATCHES):
        mod_deadline = query.deadline
        if num_batch != 1:
            mod_deadline -= _agg_ms(agg, n, num_batch)
        pending = total
        time_pt = mod_deadline
        batches = []
        cost = 0.0
        while pending > 0:
            avail = input_time(profile, st.offset + pending)
            if pending == total:
                avail = max(avail, query.wind_end)
            dur = time_pt - avail
            if dur <= 0:
                raise Infeasible(f"query {query.query_id}: no room for a batch before its tuples exist")
            k = estimate_tuples(proc, n, dur / 1000.0)
            if k >= pending:
                k = pending
                dur = _bct_ms(proc, n, pending)
            elif _bct_ms(proc, n, k) > dur:
                # tuple count rounding vs millisecond ceiling
                k -= 1
            if k <= 0:
                raise Infeasible(f"query {query.query_id}: batch overhead exceeds the time left")
            batches.append((time_pt - dur, k))
            cost += batch_cost_ms(config, _bct_ms(proc, n, k))
            pending -= k
            time_pt -= dur
            if len(batches) > MAX_BATCHES:
                raise Infeasible("batch count cap exceeded")
        if len(batches) <= num_batch:
            if num_batch != 1:
                cost += batch_cost_ms(config, _agg_ms(agg, n, num_batch))
            return cost, list(reversed(batches))
    raise Infeasible("batch count cap exceeded")
