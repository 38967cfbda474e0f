"""Shared test helpers."""
from elastiq.corpus import random_workload, toy_workload
from elastiq.cost_model import PriceTable
from elastiq.executor import ScenarioConfig
from elastiq.workload import cumulative_tuples

EMR_PRICES = PriceTable(0.202, 0.048)


def scenario_for(workload, min_nodes=None, **kw):
    if min_nodes is None:
        min_nodes = min(2, workload.configs[0].worker_nodes)
    kw.setdefault("prices", EMR_PRICES)
    return ScenarioConfig(workload=workload, min_nodes=min_nodes, **kw)


def toy_scenario(deadline_s=16, **kw):
    return scenario_for(toy_workload(deadline_s), min_nodes=1, **kw)


def random_scenario(wl_seed, **kw):
    return scenario_for(random_workload(wl_seed), **kw)


_BATCH_KINDS = ("BatchStart", "BatchEnd", "PartialAgg", "FinalAgg")


def batch_spans(trace):
    """{(query_id, batch_no): (start_ms, end_ms, nodes, tuples)} from a trace."""
    out = {}
    for e in trace.events:
        if e.kind not in _BATCH_KINDS:
            continue
        key = (e.query_id, e.batch_no)
        if e.kind == "BatchStart":
            out[key] = [e.time_ms, e.time_ms, e.nodes, int(e.detail.split()[1])]
        else:
            out[key][1] = max(out[key][1], e.time_ms)
    return {k: tuple(v) for k, v in out.items()}


def plan_mismatches(trace, tol_ms=1):
    """Plan entries of the first plan whose executed span differs by more than tol_ms."""
    spans = batch_spans(trace)
    bad = []
    for e in trace.plans[0].entries:
        got = spans.get((e.query_id, e.batch_no))
        if got is None or abs(got[0] - e.bst) > tol_ms or abs(got[1] - e.bet) > tol_ms or got[3] != e.tuples:
            bad.append((e, got))
    if len(spans) != len(trace.plans[0].entries):
        bad.append(("batch count", len(spans), len(trace.plans[0].entries)))
    return bad


def check_trace(scen, tr):
    spans = sorted(batch_spans(tr).items(), key=lambda kv: kv[1][0])
    # one batch at a time, never preempted
    for (_, a), (_, b) in zip(spans, spans[1:]):
        assert a[1] <= b[0]
    used = {}
    queries = {q.query_id: q for q in scen.workload.queries}
    queries.update({a.query.query_id: a.query for a in scen.query_arrivals if a.action == "add"})
    for (qid, _), (t0, t1, nodes, n) in spans:
        q = queries[qid]
        prof = scen.actual[q.input_stream]
        before = cumulative_tuples(prof, q.wind_start - 1)
        used[qid] = used.get(qid, 0) + n
        # every tuple in the batch had arrived when it started
        assert cumulative_tuples(prof, min(t0, q.wind_end)) - before >= used[qid]
        for t in {t0, *(t for t, _ in tr.node_timeline.points if t0 <= t < t1)}:
            assert tr.node_timeline.at(t) >= nodes
    for qid, (t, met) in tr.outcomes.items():
        q = queries[qid]
        prof = scen.actual[q.input_stream]
        total = cumulative_tuples(prof, q.wind_end) - cumulative_tuples(prof, q.wind_start - 1)
        assert used.get(qid, 0) == total
        assert met == (t <= q.deadline)
