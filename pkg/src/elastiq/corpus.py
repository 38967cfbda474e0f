"""Programmatic workloads: the two-config toy and seeded random desk-scale mixes."""
from __future__ import annotations

import random

from .cost_model import ZERO_AGG, AggCostModel, ClusterConfig, ProcCostModel
from .simulator import QueryModels, Workload
from .workload import InputProfile, QuerySpec

EMR_NODE_SECOND = (0.202 + 0.048) / 3600.0


def toy_workload(deadline_s=16):
    """12 tuples at 1/s over [1, 12] s; 1 node at 2 t/s or 2 nodes at 4 t/s."""
    prof = InputProfile("toy", ((0, 1.0),), 12_000)
    q = QuerySpec("Q1", 1_000, 12_000, int(deadline_s * 1000), "toy", input_rate=1.0)
    models = {"default": QueryModels(ProcCostModel(a_parallel=0.5), ZERO_AGG)}
    configs = (ClusterConfig(1, 1, 1.0), ClusterConfig(2, 2, 1.25))
    return Workload((q,), {"toy": prof}, models, configs)


NODE_CHOICES = (2, 4, 6, 10, 14, 20)


def random_model(rng):
    proc = ProcCostModel(
        a_serial=round(rng.uniform(0.0002, 0.001), 6),
        a_parallel=round(rng.uniform(0.01, 0.04), 5),
        b_fixed=round(rng.uniform(4, 15), 3),
        b_per_node=round(rng.uniform(0, 8), 3),
    )
    agg = AggCostModel(((2, 3.0), (10, round(rng.uniform(10, 25), 2)), (60, round(rng.uniform(40, 90), 2))),
                       (0.5, 1.0))
    return QueryModels(proc, agg)


def random_workload(seed, n_queries=(2, 13), n_configs=(2, 5), slack=(0.05, 0.6)):
    """Seeded random mix with one stream and one model per query."""
    rng = random.Random(seed)
    nq = rng.randint(*n_queries)
    nc = rng.randint(*n_configs)
    nodes = sorted(rng.sample(NODE_CHOICES, nc))
    configs = tuple(ClusterConfig(i + 1, n, EMR_NODE_SECOND) for i, n in enumerate(nodes))
    queries, profiles, models = [], {}, {}
    for i in range(nq):
        sid = f"s{i + 1}"
        start = rng.randint(0, 1200) * 1000
        length = rng.randint(300, 1500) * 1000
        rate = float(rng.randint(4, 30))
        segs = [(start, rate)]
        if rng.random() < 0.4:
            segs.append((start + length // 2, float(rng.randint(4, 30))))
        profiles[sid] = InputProfile(sid, tuple(segs), start + length)
        models[f"m{i + 1}"] = random_model(rng)
        deadline = start + length + int(length * rng.uniform(*slack))
        queries.append(QuerySpec(f"Q{i + 1:02d}", start + 1, start + length, deadline, sid,
                                 model=f"m{i + 1}", input_rate=rate))
    return Workload(tuple(queries), profiles, models, configs)


def tiny_workload(seed):
    """At most two queries and a handful of batches, for exhaustive search."""
    rng = random.Random(seed)
    nq = rng.randint(1, 2)
    nc = rng.randint(2, 3)
    nodes = sorted(rng.sample((2, 4, 6, 8), nc))
    configs = tuple(ClusterConfig(i + 1, n, 0.01) for i, n in enumerate(nodes))
    queries, profiles, models = [], {}, {}
    for i in range(nq):
        sid = f"s{i + 1}"
        start = rng.randint(0, 20) * 1000
        length = rng.randint(10, 40) * 1000
        rate = float(rng.randint(1, 4))
        profiles[sid] = InputProfile(sid, ((start, rate),), start + length)
        proc = ProcCostModel(
            a_serial=round(rng.uniform(0.0, 0.1), 3),
            a_parallel=round(rng.uniform(0.1, 0.6), 3),
            b_fixed=round(rng.uniform(0.5, 3.0), 2),
            b_per_node=round(rng.uniform(0.0, 2.0), 2),
        )
        agg = AggCostModel(((2, 0.5), (6, round(rng.uniform(1, 3), 2))), (0.5, 1.0))
        models[f"m{i + 1}"] = QueryModels(proc, agg)
        deadline = start + length + rng.randint(3, 30) * 1000
        queries.append(QuerySpec(f"Q{i + 1}", start + 1, start + length, deadline, sid, model=f"m{i + 1}"))
    return Workload(tuple(queries), profiles, models, configs)
