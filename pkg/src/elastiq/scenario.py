"""Scenario documents: JSON (version 1) to ScenarioConfig, with strict key checking.

Times in documents are seconds; everything internal is integer milliseconds.
ELASTIQ_LEAD_S, ELASTIQ_RATE_WINDOW_S, ELASTIQ_RELEASE_DELAY_S and
ELASTIQ_RELEASE_IDLE_S replace the built-in defaults when a document leaves
the field out.
"""
from __future__ import annotations

import json
import math
import os
from importlib import resources

from .baselines import AutoscaleRules
from .cost_model import AggCostModel, ClusterConfig, PriceTable, ProcCostModel, to_ms, validate_config_set
from .errors import ScenarioError
from .executor import QueryArrival, ScenarioConfig
from .simulator import QueryModels, SimParams, Workload
from .workload import InputProfile, QuerySpec

VERSION = 1
TOP_KEYS = {"version", "name", "min_worker_nodes", "prices", "configs", "models", "streams",
            "actual_streams", "queries", "sim", "executor", "query_arrivals", "autoscale"}
ENV_DEFAULTS = {
    "lead_s": ("ELASTIQ_LEAD_S", 360.0),
    "rate_window_s": ("ELASTIQ_RATE_WINDOW_S", 180.0),
    "release_delay_s": ("ELASTIQ_RELEASE_DELAY_S", 90.0),
    "release_idle_s": ("ELASTIQ_RELEASE_IDLE_S", 720.0),
}


def _keys(d, allowed, required=(), where="document"):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ScenarioError(f"{where}: missing keys {missing}")
    return d


def env_default(name):
    var, fallback = ENV_DEFAULTS[name]
    raw = os.environ.get(var)
    if raw is None:
        return fallback
    try:
        v = float(raw)
    except ValueError:
        raise ScenarioError(f"{var}={raw!r} is not a number") from None
    if not math.isfinite(v) or v < 0:
        raise ScenarioError(f"{var} must be a finite number >= 0")
    return v


def _profile(sid, d, where):
    _keys(d, {"segments", "end_s", "granule"}, ("segments", "end_s"), where)
    segs = tuple((to_ms(t), float(r)) for t, r in d["segments"])
    if not segs:
        raise ScenarioError(f"{where}: no segments")
    return InputProfile(sid, segs, to_ms(d["end_s"]), int(d.get("granule", 1)))


def _query(d, where):
    _keys(d, {"id", "window_s", "deadline_s", "stream", "model", "rate"}, ("id", "window_s", "deadline_s", "stream"),
          where)
    ws, we = d["window_s"]
    return QuerySpec(str(d["id"]), to_ms(ws), to_ms(we), to_ms(d["deadline_s"]), str(d["stream"]),
                     model=str(d.get("model", "default")), input_rate=d.get("rate"))


def _model(d, where):
    _keys(d, {"proc", "agg"}, ("proc",), where)
    p = _keys(d["proc"], {"a_serial", "a_parallel", "b_fixed", "b_per_node", "valid_nodes"}, (), where + ".proc")
    kw = {k: float(v) for k, v in p.items() if k != "valid_nodes"}
    if "valid_nodes" in p:
        kw["valid_nodes"] = tuple(int(v) for v in p["valid_nodes"])
    proc = ProcCostModel(**kw)
    agg = d.get("agg", {})
    _keys(agg, {"breakpoints", "node_scale"}, (), where + ".agg")
    agg = AggCostModel(tuple(tuple(b) for b in agg.get("breakpoints", ())), tuple(agg.get("node_scale", (1.0, 0.0))))
    return QueryModels(proc, agg)


def _sim(d):
    _keys(d, {"c_max_s", "bsf_set", "step_k", "partial_agg_fraction", "dispatch", "reset_earlier",
              "max_nodes_cap", "msr_step", "msr_ceiling"}, (), "sim")
    kw = {}
    if "c_max_s" in d:
        kw["c_max"] = float(d["c_max_s"])
    if "bsf_set" in d:
        kw["bsf_set"] = tuple(int(x) for x in d["bsf_set"])
    for k in ("step_k", "max_nodes_cap"):
        if k in d:
            kw[k] = int(d[k])
    for k in ("partial_agg_fraction", "msr_step", "msr_ceiling"):
        if k in d and d[k] is not None:
            kw[k] = float(d[k])
    if "dispatch" in d:
        kw["dispatch"] = str(d["dispatch"])
    if "reset_earlier" in d:
        kw["reset_earlier"] = bool(d["reset_earlier"])
    return kw


def from_dict(doc) -> tuple[ScenarioConfig, AutoscaleRules]:
    """Build (scenario, autoscale rules) from a parsed document.

    Raises:
        ScenarioError: schema violations and unresolved references.
    """
    _keys(doc, TOP_KEYS, ("version", "configs", "models", "streams", "queries", "prices"))
    if doc["version"] != VERSION:
        raise ScenarioError(f"unsupported scenario version {doc['version']!r}")
    try:
        return _build(doc)
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError(f"bad scenario: {exc}") from exc


def _build(doc):
    pr = _keys(doc["prices"], {"machine_rate_per_hour", "platform_rate_per_hour", "minimum_billed_seconds"},
               ("machine_rate_per_hour", "platform_rate_per_hour"), "prices")
    prices = PriceTable(float(pr["machine_rate_per_hour"]), float(pr["platform_rate_per_hour"]),
                        float(pr.get("minimum_billed_seconds", 60.0)))
    configs = []
    for i, c in enumerate(doc["configs"]):
        _keys(c, {"id", "worker_nodes", "price_per_node_second"}, ("id", "worker_nodes"), f"configs[{i}]")
        configs.append(ClusterConfig(int(c["id"]), int(c["worker_nodes"]),
                                     float(c.get("price_per_node_second", prices.per_node_second))))
    min_nodes = int(doc.get("min_worker_nodes", 2))
    validate_config_set(configs, min_nodes=min_nodes)
    models = {str(k): _model(v, f"models.{k}") for k, v in doc["models"].items()}
    streams = {str(k): _profile(str(k), v, f"streams.{k}") for k, v in doc["streams"].items()}
    actual = None
    if "actual_streams" in doc:
        actual = {str(k): _profile(str(k), v, f"actual_streams.{k}") for k, v in doc["actual_streams"].items()}
        if set(actual) != set(streams):
            raise ScenarioError("actual_streams must list the same stream ids as streams")
    queries = [_query(q, f"queries[{i}]") for i, q in enumerate(doc["queries"])]
    ids = [q.query_id for q in queries]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate query ids")
    for q in queries:
        _check_refs(q, streams, models)
    params = SimParams(**_sim(doc.get("sim", {})))
    ex = _keys(doc.get("executor", {}), {"rate_policy", "rate_window_s", "rate_deviation_pct", "noise_pct", "seed",
                                          "lead_s", "release_delay_s", "release_idle_s", "start_s"}, (), "executor")
    arrivals = []
    for i, a in enumerate(doc.get("query_arrivals", ())):
        _keys(a, {"time_s", "action", "query", "query_id"}, ("time_s", "action"), f"query_arrivals[{i}]")
        q = _query(a["query"], f"query_arrivals[{i}].query") if "query" in a else None
        if q is not None:
            _check_refs(q, streams, models)
        arrivals.append(QueryArrival(to_ms(a["time_s"]), str(a["action"]), q, str(a.get("query_id", ""))))

    def pick(name):
        return float(ex[name]) if name in ex else env_default(name)

    scen = ScenarioConfig(
        workload=Workload(tuple(queries), streams, models, tuple(configs)),
        prices=prices,
        params=params,
        actual_profiles=actual,
        rate_policy=str(ex.get("rate_policy", "pessimistic")),
        rate_window_ms=to_ms(pick("rate_window_s")),
        rate_deviation_pct=float(ex.get("rate_deviation_pct", 2.0)),
        query_arrivals=tuple(arrivals),
        noise_pct=float(ex.get("noise_pct", 0.0)),
        seed=int(ex.get("seed", 0)),
        lead_ms=to_ms(pick("lead_s")),
        release_delay_ms=to_ms(pick("release_delay_s")),
        release_idle_ms=to_ms(pick("release_idle_s")),
        min_nodes=min_nodes,
        start_ms=to_ms(ex.get("start_s", 0)),
        name=str(doc.get("name", "scenario")),
    )
    au = _keys(doc.get("autoscale", {}), {"scale_out_below_pct", "scale_in_above_pct", "min_nodes", "max_nodes",
                                          "evaluation_period_s"}, (), "autoscale")
    rules = AutoscaleRules(**{k: (int(v) if k.endswith("nodes") else float(v)) for k, v in au.items()})
    return scen, rules


def _check_refs(q, streams, models):
    if q.input_stream not in streams:
        raise ScenarioError(f"query {q.query_id}: unknown stream {q.input_stream!r}")
    if q.model not in models:
        raise ScenarioError(f"query {q.query_id}: unknown model {q.model!r}")


def load(path):
    """Parse a scenario file. Raises ScenarioError on unreadable or invalid input."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(doc)


def bundled_names():
    return sorted(p.name[:-5] for p in resources.files("elastiq").joinpath("scenarios").iterdir()
                  if p.name.endswith(".json"))


def bundled_path(name):
    return str(resources.files("elastiq").joinpath("scenarios", f"{name}.json"))


def load_bundled(name):
    return load(bundled_path(name))
