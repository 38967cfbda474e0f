import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiq.baselines import fixed_config_schedule
from elastiq.checker import check_schedule
from elastiq.corpus import random_workload, tiny_workload, toy_workload
from elastiq.cost_model import ZERO_AGG, AggCostModel, ClusterConfig, ProcCostModel
from elastiq.errors import Infeasible, InfeasibleBatch, NoFeasibleSchedule
from elastiq.simulator import (
    QueryModels,
    SimParams,
    Workload,
    base_batch_size,
    batch_sizes_for,
    choose_schedule,
    gen_schedule,
    max_supported_rate,
    optimize_schedule,
    single_query_cost_est,
)
from elastiq.workload import InputProfile, QuerySpec

from oracles import (
    arrival_ms,
    brute_force_opt,
    feasible_batch_splits,
    proc_ms,
    scan_base_size,
    split,
    window_total,
)

TOY_PARAMS = SimParams(floor_nodes=1)


def _toy_ready(k):
    # k-th toy tuple lands at k seconds
    return k * 1000


# ---------------------------------------------------------------- batch sizes

@settings(max_examples=80, deadline=None)
@given(
    st.integers(1, 400),
    st.floats(0, 0.05),
    st.floats(0.001, 0.5),
    st.floats(0, 10),
    st.floats(0, 5),
    st.sampled_from([1, 2, 4, 10]),
)
def test_base_size_matches_scan(total, a_s, a_p, b_f, b_n, nodes):
    proc = ProcCostModel(a_s, a_p, b_f, b_n)
    c1 = ClusterConfig(1, nodes, 1.0)
    assert base_batch_size(total, proc, c1) == scan_base_size(total, proc, nodes)


def test_base_size_cmax_cap():
    proc = ProcCostModel(a_parallel=0.5, b_fixed=2.0)
    c1 = ClusterConfig(1, 1, 1.0)
    # uncapped size is 4 (4 s); 2 + 0.5x < 3.5 s allows at most 2 tuples
    assert base_batch_size(200, proc, c1) == 4
    assert base_batch_size(200, proc, c1, c_max=3.5) == scan_base_size(200, proc, 1, c_max=3.5) == 2
    with pytest.raises(InfeasibleBatch):
        base_batch_size(200, proc, c1, c_max=2.0)


def test_batch_sizes_round_to_granule():
    w = toy_workload()
    prof = replace(w.profiles["toy"], segments=((0, 10.0),), granule=4)
    w = replace(w, profiles={"toy": prof})
    sizes = batch_sizes_for(w, 1, SimParams())
    assert sizes["Q1"] % 4 == 0


# ---------------------------------------------------------------- toy scenario

def test_toy_deadline16_plan():
    w = toy_workload(16)
    s = choose_schedule(w, TOY_PARAMS)
    assert s.total_cost == 6.0
    assert s.max_nodes == 1
    got = [(e.bst, e.bet, e.tuples, e.req_nodes) for e in s.entries]
    # 8 tuples in at 8 s take 4 s on one node; the last 4 are in at 12 s
    assert got == [(8000, 12000, 8, 1), (12000, 14000, 4, 1)]
    cost, _ = brute_force_opt(w)
    assert cost == pytest.approx(6.0)
    assert check_schedule(s, w) == []


def test_toy_deadline13_one_node_is_feasible():
    # exhaustive split search on one node: some split finishes by 13 s
    fin = feasible_batch_splits(12, _toy_ready, lambda n: proc_ms(ProcCostModel(a_parallel=0.5), 1, n), 13_000, 12_000)
    assert fin is not None and fin[0] <= 13_000
    w = toy_workload(13)
    s = choose_schedule(w, TOY_PARAMS)
    assert s.total_cost == 6.0 and s.max_nodes == 1
    assert check_schedule(s, w) == []


def test_toy_two_node_only_costs_7_50():
    w = toy_workload(13)
    two = replace(w, configs=(w.configs[1],))
    s = choose_schedule(two, TOY_PARAMS)
    assert s.total_cost == pytest.approx(7.5)
    cost, _ = brute_force_opt(two)
    assert cost == pytest.approx(7.5)


def test_toy_infeasible_when_deadline_too_tight():
    # the last tuple lands at 12 s and even 2 nodes need 250 ms for it
    w = toy_workload(12.2)
    with pytest.raises(NoFeasibleSchedule):
        choose_schedule(w, TOY_PARAMS)


def test_single_query_cost_est_toy():
    w = toy_workload(16)
    q, prof, models = w.queries[0], w.profiles["toy"], w.models["default"]
    c1, c2 = w.configs
    assert single_query_cost_est(q, c1, models, prof) == (6.0, [(10_000, 4), (12_000, 8)])
    assert single_query_cost_est(q, c2, models, prof) == (7.5, [(13_000, 12)])
    q13 = replace(q, deadline=13_000)
    cost, batches = single_query_cost_est(q13, c1, models, prof)
    assert cost == 6.0
    assert [k for _, k in batches] == [6, 4, 2]
    assert single_query_cost_est(q13, c2, models, prof)[0] == 7.5
    with pytest.raises(Infeasible):
        single_query_cost_est(replace(q, deadline=12_100), c1, models, prof)


def test_single_query_batches_respect_readiness():
    w = random_workload(3, n_queries=(1, 1))
    q = w.queries[0]
    prof = w.profile_of(q)
    c = w.configs[-1]
    try:
        _, batches = single_query_cost_est(q, c, w.models_of(q), prof)
    except Infeasible:
        pytest.skip("seed infeasible on this config")
    off, total = window_total(prof, q)
    used = 0
    for i, (start, k) in enumerate(batches):
        used += k
        ready = arrival_ms(prof, off + used)
        if i == len(batches) - 1:
            ready = max(ready, q.wind_end)
        assert start >= ready
    assert used == total


# ---------------------------------------------------------------- max supported rate

def _pinned_single_ok(w, size, nodes):
    q = w.queries[0]
    prof = w.profile_of(q)
    off, total = window_total(prof, q)
    t = -math.inf
    used = 0
    parts = split(total, size)
    for i, n in enumerate(parts):
        used += n
        ready = arrival_ms(prof, off + used)
        if i == len(parts) - 1:
            ready = max(ready, q.wind_end)
        t = max(t, ready) + proc_ms(w.models_of(q).proc, nodes, n)
    return t <= q.deadline


def _msr_oracle(w, size, nodes, step=0.1, ceiling=16.0):
    good = 1.0
    m = 1.0 + step
    lattice = []
    while m < ceiling - 1e-12:
        lattice.append(m)
        m *= 1.0 + step
    lattice.append(ceiling)
    for m in lattice:
        if not _pinned_single_ok(w.scaled(m), size, nodes):
            break
        good = m
    return round(good, 6)


def test_max_supported_rate_toy():
    w = toy_workload(16)
    s = choose_schedule(w, TOY_PARAMS)
    got = max_supported_rate(w, s, TOY_PARAMS)
    assert got == _msr_oracle(w, s.batch_sizes["Q1"], 1)
    assert got == 1.948717


def test_max_supported_rate_at_least_one():
    w = random_workload(5)
    p = SimParams()
    s = choose_schedule(w, p)
    assert max_supported_rate(w, s, p) >= 1.0


# ---------------------------------------------------------------- planner properties

@pytest.mark.parametrize("seed", range(6))
def test_random_plans_pass_checker(seed):
    w = random_workload(seed)
    s = choose_schedule(w, SimParams())
    assert check_schedule(s, w) == []


def test_checker_catches_tampering():
    w = random_workload(1)
    s = choose_schedule(w, SimParams())
    e = s.entries[0]
    bad = replace(s, entries=[replace(e, bst=e.bst - 5_000)] + s.entries[1:])
    assert check_schedule(bad, w)
    short = replace(s, entries=s.entries[1:])
    assert check_schedule(short, w)


@pytest.mark.parametrize("seed", range(4))
def test_choice_is_deterministic(seed):
    w = random_workload(seed)
    a = choose_schedule(w, SimParams())
    b = choose_schedule(w, SimParams())
    assert a.entries == b.entries and a.total_cost == b.total_cost


@pytest.mark.parametrize("seed", range(5))
def test_optimize_never_costs_more(seed):
    w = random_workload(seed)
    p = SimParams()
    for level in range(len(w.configs)):
        try:
            s = gen_schedule(level, 4, w, p)
        except Infeasible:
            continue
        o = optimize_schedule(s, w, p)
        assert o.total_cost <= s.total_cost + 1e-12
        assert check_schedule(o, w) == []


@pytest.mark.parametrize("seed", range(6))
def test_k1_no_dearer_than_k100(seed):
    w = random_workload(seed)
    c1 = choose_schedule(w, SimParams(step_k=1)).total_cost
    c100 = choose_schedule(w, SimParams(step_k=100)).total_cost
    assert c1 <= c100 + 1e-9


@pytest.mark.parametrize("seed", range(6))
def test_elastic_not_dearer_than_fixed(seed):
    w = random_workload(seed)
    p = SimParams()
    e = choose_schedule(w, p).total_cost
    for c in w.configs:
        try:
            f = fixed_config_schedule(w, c, p).total_cost
        except Infeasible:
            continue
        assert e <= f + 1e-9


def test_fixed_config_uses_one_config():
    w = random_workload(2)
    c = w.configs[-1]
    s = fixed_config_schedule(w, c, SimParams())
    assert {e.config_id for e in s.entries} == {c.id}
    assert check_schedule(s, w) == []


def test_node_cap_respected():
    w = random_workload(4)
    cap = w.configs[-1].worker_nodes
    s = choose_schedule(w, SimParams(max_nodes_cap=cap))
    assert s.max_nodes <= cap
    with pytest.raises(NoFeasibleSchedule):
        choose_schedule(w, SimParams(max_nodes_cap=w.configs[0].worker_nodes - 1))


def test_partial_aggregation_folds():
    w = random_workload(7)
    s = choose_schedule(w, SimParams(partial_agg_fraction=0.25))
    assert check_schedule(s, w) == []
    folded = [e for e in s.entries if e.partial_agg]
    for e in folded:
        assert e.pat > 0 and not e.final


def test_avail_delays_bigger_batches():
    w = random_workload(0)
    p = SimParams()
    ready = 200_000
    s = choose_schedule(w, p, avail=(w.configs[0].worker_nodes, ready))
    for e in s.entries:
        if e.req_nodes > w.configs[0].worker_nodes:
            assert e.bst >= ready
    assert check_schedule(s, w) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tiny_plans_checked(seed):
    w = tiny_workload(seed)
    try:
        s = choose_schedule(w, SimParams())
    except NoFeasibleSchedule:
        return
    assert check_schedule(s, w) == []


# ---------------------------------------------------------------- idle release

def _two_far_queries():
    proc = ProcCostModel(a_parallel=0.4, b_fixed=1.0)
    models = {"m": QueryModels(proc, ZERO_AGG)}
    profiles = {
        "a": InputProfile("a", ((0, 1.0),), 60_000),
        "b": InputProfile("b", ((2_000_000, 1.0),), 2_060_000),
    }
    qs = (
        QuerySpec("A", 1, 60_000, 70_000, "a", model="m"),
        QuerySpec("B", 2_000_001, 2_060_000, 2_070_000, "b", model="m"),
    )
    return Workload(qs, profiles, models, (ClusterConfig(1, 4, 0.001),))


def test_release_idle_drops_to_floor_and_reacquires_early():
    w = _two_far_queries()
    p = SimParams(floor_nodes=2, lead_ms=360_000, release_idle_ms=720_000)
    s = choose_schedule(w, p)
    last_a = max(e.bet for e in s.entries if e.query_id == "A")
    tl = s.timeline
    assert tl.at(last_a) == 2
    # nodes come back one lead time before window B opens
    assert tl.at(2_000_001 - 360_000 - 1) == 2
    assert tl.at(2_000_001 - 360_000) == 4
    assert check_schedule(s, w) == []


def test_release_idle_skips_short_gaps():
    w = _two_far_queries()
    p = SimParams(floor_nodes=2, release_idle_ms=3_000_000)
    s = choose_schedule(w, p)
    assert {n for _, n in s.timeline.points} <= {0, 4}


def test_aggregation_counts_in_final_batch():
    w = toy_workload(30)
    agg = AggCostModel(((2, 1.0), (4, 2.0)), (1.0, 0.0))
    w = replace(w, models={"default": QueryModels(w.models["default"].proc, agg)})
    s = choose_schedule(w, TOY_PARAMS)
    last = s.entries[-1]
    k = len(s.entries)
    assert last.final
    assert last.fat == (0 if k == 1 else math.ceil(1000 * agg.g(k)))
    assert check_schedule(s, w) == []
