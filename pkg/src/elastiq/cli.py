"""elastiq command line: fit | simulate | run | compare | sweep.

Exit codes: 0 ok, 2 bad input data, 3 infeasible, 64 usage.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import replace

from .baselines import autoscale_run, fixed_config_schedule, naive_llf_run
from .cost_model import fit_proc_model
from .errors import DegenerateSamples, Infeasible, NoFeasibleSchedule, ScenarioError, ScenarioInfeasible
from .executor import run_scenario
from .scenario import bundled_names, bundled_path, load
from .simulator import choose_schedule, max_supported_rate

EXIT_OK, EXIT_DATA, EXIT_INFEASIBLE, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ---------------------------------------------------------------- output helpers

def write_atomic(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows, seed):
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _money(x):
    return f"{x:.4f}"


class _Out:
    def __init__(self, quiet):
        self.quiet = quiet

    def __call__(self, *a):
        if not self.quiet:
            print(*a)


# ---------------------------------------------------------------- scenario handling

def _resolve(arg):
    if os.path.exists(arg):
        return arg
    if arg in bundled_names():
        return bundled_path(arg)
    raise ScenarioError(f"no scenario file or bundled scenario named {arg!r}")


def _load(args):
    scen, rules = load(_resolve(args.scenario))
    if args.seed is not None:
        scen = replace(scen, seed=args.seed)
    return scen, rules


def _parse_bsf(text):
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--bsf-set wants comma separated integers, got {text!r}") from None
    if not vals:
        raise UsageError("--bsf-set is empty")
    return vals


def _sim_params(scen, args):
    p = scen.sim_params()
    kw = {}
    if getattr(args, "k", None) is not None:
        if args.k < 1:
            raise UsageError("--k must be >= 1")
        kw["step_k"] = args.k
    if getattr(args, "bsf_set", None):
        kw["bsf_set"] = _parse_bsf(args.bsf_set)
    pa = getattr(args, "partial_agg", None)
    if pa is not None:
        if pa == "off":
            kw["partial_agg_fraction"] = None
        else:
            try:
                kw["partial_agg_fraction"] = float(pa)
            except ValueError:
                raise UsageError(f"--partial-agg wants a fraction or 'off', got {pa!r}") from None
    try:
        return replace(p, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _schedule_rows(sch):
    return [[e.query_id, e.batch_no, e.bst, e.bet, e.req_nodes, e.config_id, e.tuples, e.pending,
             int(e.partial_agg), int(e.final)] for e in sch.entries]


SCHEDULE_HEADER = ["query_id", "batch_no", "bst_ms", "bet_ms", "nodes", "config_id", "tuples", "pending",
                   "partial_agg", "final"]


# ---------------------------------------------------------------- commands

def cmd_fit(args, out):
    rows = []
    try:
        with open(args.samples, encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(row for row in fh if not row.startswith("#")):
                rows.append((int(rec["nodes"]), int(rec["tuples"]), float(rec["seconds"])))
    except OSError as exc:
        print(f"cannot read {args.samples}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError, TypeError) as exc:
        print(f"{args.samples}: need columns nodes,tuples,seconds ({exc})", file=sys.stderr)
        return EXIT_DATA
    try:
        m = fit_proc_model(rows)
    except DegenerateSamples as exc:
        print(f"cannot fit: {exc}", file=sys.stderr)
        return EXIT_DATA
    doc = {"seed": args.seed, "proc": {"a_serial": m.a_serial, "a_parallel": m.a_parallel, "b_fixed": m.b_fixed,
                                       "b_per_node": m.b_per_node, "valid_nodes": list(m.valid_nodes)},
           "fit_rms_s": m.fit_rms, "samples": len(rows)}
    write_atomic(os.path.join(args.out, "model.json"), _json(doc))
    out(f"a_serial={m.a_serial:.9g} a_parallel={m.a_parallel:.9g} b_fixed={m.b_fixed:.9g} b_per_node={m.b_per_node:.9g}")
    out(f"residual_rms_s={m.fit_rms:.6g}")
    return EXIT_OK


def cmd_simulate(args, out):
    scen, _ = _load(args)
    p = _sim_params(scen, args)
    t0 = time.perf_counter()
    try:
        sch = choose_schedule(scen.workload, p)
    except NoFeasibleSchedule as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    wall = time.perf_counter() - t0
    msr = max_supported_rate(scen.workload, sch, p)
    doc = {
        "seed": scen.seed, "scenario": scen.name, "total_cost": round(sch.total_cost, 4), "max_nodes": sch.max_nodes,
        "batch_size_factor": sch.batch_size_factor, "init_config": sch.init_config,
        "max_supported_rate": msr, "batch_sizes": sch.batch_sizes, "step_k": p.step_k,
        "aggregation_mode": p.aggregation_mode,
        "timeline": [list(pt) for pt in sch.timeline.points], "stats": sch.stats,
    }
    write_atomic(os.path.join(args.out, "plan.json"), _json(doc))
    write_atomic(os.path.join(args.out, "schedule.csv"), _csv(SCHEDULE_HEADER, _schedule_rows(sch), scen.seed))
    out(f"cost {sch.total_cost:.2f}")
    out(f"max_nodes {sch.max_nodes}")
    out(f"batch_size_factor {sch.batch_size_factor}")
    out(f"init_config {sch.init_config}")
    out(f"max_supported_rate {msr}")
    out(f"sim_wall_s {wall:.6f}")
    return EXIT_OK


def _strategy(scen, rules, name):
    """Run one named strategy; returns an ExecutionTrace."""
    configs = {str(c.id): c for c in scen.workload.configs}
    if name == "elastic":
        return run_scenario(scen)
    if name == "autoscale":
        return autoscale_run(scen, rules)
    kind, _, cid = name.partition(":")
    if kind == "naive-llf":
        c = configs.get(cid) if cid else scen.workload.configs[0]
        if c is None:
            raise UsageError(f"unknown config id {cid!r}")
        return naive_llf_run(scen, c)
    if kind == "fixed" and cid:
        c = configs.get(cid)
        if c is None:
            raise UsageError(f"unknown config id {cid!r}")
        pinned = replace(scen, workload=replace(scen.workload, configs=(c,)))
        tr = run_scenario(pinned)
        tr.strategy = name
        return tr
    raise UsageError(f"unknown strategy {name!r} (elastic, fixed:<id>, naive-llf[:<id>], autoscale)")


TRACE_HEADER = ["time_ms", "event", "query_id", "batch_no", "nodes", "detail"]


def cmd_run(args, out):
    scen, rules = _load(args)
    try:
        tr = _strategy(scen, rules, args.strategy)
    except ScenarioInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    rows = [[e.time_ms, e.kind, e.query_id, e.batch_no, e.nodes, e.detail] for e in tr.events]
    write_atomic(os.path.join(args.out, "trace.csv"), _csv(TRACE_HEADER, rows, scen.seed))
    write_atomic(os.path.join(args.out, "nodes.csv"),
                 _csv(["time_ms", "nodes"], [list(p) for p in tr.node_timeline.points], scen.seed))
    summary = dict(tr.summary(), seed=scen.seed, scenario=scen.name)
    write_atomic(os.path.join(args.out, "summary.json"), _json(summary))
    out(f"strategy {tr.strategy}")
    out(f"cost {_money(tr.total_cost)}")
    out(f"misses {tr.misses}")
    out(f"max_nodes {tr.max_nodes}")
    out(f"resimulations {tr.resim_count}")
    return EXIT_OK


def cmd_compare(args, out):
    scen, rules = _load(args)
    p = scen.sim_params()
    rows = []
    names = ["elastic"] + [f"fixed:{c.id}" for c in scen.workload.configs] + ["naive-llf", "autoscale"]
    for name in names:
        try:
            tr = _strategy(scen, rules, name)
        except ScenarioInfeasible:
            rows.append([name, "infeasible", "", ""])
            continue
        rows.append([name, _money(tr.total_cost), tr.misses, tr.max_nodes])
    write_atomic(os.path.join(args.out, "compare.csv"), _csv(["strategy", "cost", "misses", "max_nodes"], rows, scen.seed))
    # planned-cost inequality between the elastic grid and every pinned configuration
    try:
        elastic = choose_schedule(scen.workload, p).total_cost
    except NoFeasibleSchedule:
        elastic = None
    fixed = {}
    for c in scen.workload.configs:
        try:
            fixed[c.id] = fixed_config_schedule(scen.workload, c, p).total_cost
        except Infeasible:
            fixed[c.id] = None
    feas = [v for v in fixed.values() if v is not None]
    holds = elastic is not None and (not feas or elastic <= min(feas) + 1e-9)
    doc = {"seed": scen.seed, "scenario": scen.name,
           "planned_elastic_cost": None if elastic is None else round(elastic, 4),
           "planned_fixed_costs": {str(k): (None if v is None else round(v, 4)) for k, v in fixed.items()},
           "elastic_le_min_fixed": holds}
    write_atomic(os.path.join(args.out, "compare_summary.json"), _json(doc))
    for r in rows:
        out(",".join(str(x) for x in r))
    out(f"elastic <= min feasible fixed (planned): {'yes' if holds else 'NO'}")
    return EXIT_OK


def cmd_sweep(args, out):
    scen, _ = _load(args)
    base = scen.sim_params()
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    rows = []
    for v in values:
        wl = scen.workload
        try:
            if args.param == "k":
                p = replace(base, step_k=int(v))
            elif args.param == "partial-agg":
                p = replace(base, partial_agg_fraction=None if v == "off" else float(v))
            elif args.param == "bsf-max":
                p = replace(base, bsf_set=tuple(b for b in base.bsf_set if b <= int(v)) or (1,))
            else:  # rate
                p = base
                wl = wl.scaled(float(v))
        except ValueError as exc:
            raise UsageError(f"bad sweep value {v!r}: {exc}") from None
        t0 = time.perf_counter()
        try:
            sch = choose_schedule(wl, p)
            wall = time.perf_counter() - t0
            rows.append([args.param, v, _money(sch.total_cost), sch.max_nodes, sch.batch_size_factor,
                         sch.init_config, f"{wall:.6f}", sch.stats.get("batches_simulated", 0)])
        except NoFeasibleSchedule:
            rows.append([args.param, v, "infeasible", "", "", "", f"{time.perf_counter() - t0:.6f}", ""])
    header = ["param", "value", "cost", "max_nodes", "factor", "init_config", "wall_s", "batches_simulated"]
    write_atomic(os.path.join(args.out, "sweep.csv"), _csv(header, rows, scen.seed))
    for r in rows:
        out(",".join(str(x) for x in r))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = _Parser(prog="elastiq", description="Deadline-aware batch scheduling on an elastic cluster.")
    ap.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a processing cost model from timing samples")
    f.add_argument("samples", help="CSV with columns nodes,tuples,seconds")

    s = sub.add_parser("simulate", help="choose the cheapest feasible plan")
    s.add_argument("scenario", help="scenario JSON path or bundled name")
    s.add_argument("--k", type=int, default=None, help="backtracking step")
    s.add_argument("--bsf-set", default=None, help="batch size factors, e.g. 1,2,4")
    s.add_argument("--partial-agg", default=None, help="partial aggregation fraction or 'off'")

    r = sub.add_parser("run", help="replay a scenario with one strategy")
    r.add_argument("scenario")
    r.add_argument("--strategy", default="elastic", help="elastic | fixed:<id> | naive-llf[:<id>] | autoscale")

    c = sub.add_parser("compare", help="run every strategy side by side")
    c.add_argument("scenario")

    w = sub.add_parser("sweep", help="plan cost and time across one parameter")
    w.add_argument("scenario")
    w.add_argument("--param", choices=("k", "partial-agg", "bsf-max", "rate"), default="k")
    w.add_argument("--values", default="1,10,100")
    return ap


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.seed is not None and args.seed < 0:
        ap.error("--seed must be >= 0")
    out = _Out(args.quiet)
    try:
        return COMMANDS[args.cmd](args, out)
    except UsageError as exc:
        print(f"elastiq: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"elastiq: bad scenario: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
