import csv
import io
import json
import subprocess
import sys

import pytest

from elastiq.cli import main
from elastiq.scenario import bundled_path


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# seed=")
    return lines[0], list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


@pytest.fixture
def toy_doc():
    with open(bundled_path("toy"), encoding="utf-8") as fh:
        return json.load(fh)


def write_doc(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# ---------------------------------------------------------------- simulate

def test_simulate_toy(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", str(tmp_path), "simulate", "toy")
    assert code == 0
    assert "cost 6.00" in out.splitlines()
    assert "max_nodes 1" in out.splitlines()
    header, rows = read_csv(tmp_path / "schedule.csv")
    assert header == "# seed=0"
    assert [(r["bst_ms"], r["bet_ms"], r["tuples"], r["nodes"]) for r in rows] == [
        ("8000", "12000", "8", "1"), ("12000", "14000", "4", "1")]
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["total_cost"] == 6.0 and plan["batch_size_factor"] == 8


def test_simulate_flags_and_seed(capsys, tmp_path):
    code, out, _ = run(capsys, "--seed", "11", "--out", str(tmp_path), "simulate", "tight_multi", "--k", "10",
                       "--bsf-set", "1,2", "--partial-agg", "off")
    assert code == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["seed"] == 11 and plan["step_k"] == 10
    assert plan["batch_size_factor"] in (1, 2)
    assert read_csv(tmp_path / "schedule.csv")[0] == "# seed=11"


def test_simulate_infeasible_exit_3(capsys, tmp_path, toy_doc):
    toy_doc["queries"][0]["deadline_s"] = 12.2
    code, _, err = run(capsys, "--out", str(tmp_path), "simulate", write_doc(tmp_path, toy_doc))
    assert code == 3 and "infeasible" in err
    assert not (tmp_path / "plan.json").exists()


def test_bad_input_exit_2(capsys, tmp_path, toy_doc):
    assert run(capsys, "simulate", str(tmp_path / "none.json"))[0] == 2
    toy_doc["extra"] = True
    assert run(capsys, "simulate", write_doc(tmp_path, toy_doc))[0] == 2
    (tmp_path / "broken.json").write_text("[")
    assert run(capsys, "simulate", str(tmp_path / "broken.json"))[0] == 2


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    [],
    ["simulate"],
    ["simulate", "toy", "--k", "zero"],
    ["simulate", "toy", "--k", "0"],
    ["simulate", "toy", "--bsf-set", "1,x"],
    ["run", "toy", "--strategy", "greedy"],
    ["run", "toy", "--strategy", "fixed:9"],
    ["--seed", "-1", "simulate", "toy"],
])
def test_usage_errors_exit_64(capsys, tmp_path, argv):
    with pytest.raises(SystemExit) as exc:
        sys.exit(main(["--out", str(tmp_path)] + argv))
    assert exc.value.code == 64


# ---------------------------------------------------------------- run

def test_run_writes_trace_timeline_summary(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", str(tmp_path), "run", "toy")
    assert code == 0
    _, trace = read_csv(tmp_path / "trace.csv")
    assert list(trace[0]) == ["time_ms", "event", "query_id", "batch_no", "nodes", "detail"]
    assert [r["event"] for r in trace if r["event"].startswith("Batch")] == ["BatchStart", "BatchEnd"] * 2
    _, nodes = read_csv(tmp_path / "nodes.csv")
    assert [(r["time_ms"], r["nodes"]) for r in nodes] == [("0", "1"), ("104000", "0")]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["misses"] == 0 and summary["seed"] == 0
    assert "misses 0" in out


@pytest.mark.parametrize("strategy", ["fixed:2", "naive-llf", "naive-llf:2", "autoscale"])
def test_run_strategies(capsys, tmp_path, strategy):
    code, out, _ = run(capsys, "--quiet", "--out", str(tmp_path), "run", "tight_multi", "--strategy", strategy)
    assert code == 0 and out == ""
    assert json.loads((tmp_path / "summary.json").read_text())["strategy"].startswith(strategy.split(":")[0])


def test_run_infeasible_exit_3(capsys, tmp_path):
    code, _, _ = run(capsys, "--out", str(tmp_path), "run", "tight_multi", "--strategy", "fixed:1")
    assert code == 3


# ---------------------------------------------------------------- compare and sweep

def test_compare_is_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "--out", str(a), "compare", "tight_multi")[0] == 0
    assert run(capsys, "--out", str(b), "compare", "tight_multi")[0] == 0
    assert (a / "compare.csv").read_bytes() == (b / "compare.csv").read_bytes()
    _, rows = read_csv(a / "compare.csv")
    by = {r["strategy"]: r for r in rows}
    assert list(by) == ["elastic", "fixed:1", "fixed:2", "fixed:3", "fixed:4", "naive-llf", "autoscale"]
    assert by["fixed:1"]["cost"] == "infeasible"
    assert by["elastic"]["misses"] == "0"
    assert int(by["naive-llf"]["misses"]) >= 1
    assert all(len(r["cost"].split(".")[-1]) == 4 for r in rows if r["cost"] != "infeasible")
    summary = json.loads((a / "compare_summary.json").read_text())
    assert summary["elastic_le_min_fixed"] is True


def test_compare_elastic_cheaper_than_any_fixed(capsys, tmp_path, toy_doc):
    # 1 node alone misses, 2 nodes alone costs 7.50, mixing costs less
    toy_doc["queries"][0]["deadline_s"] = 12.3
    code, out, _ = run(capsys, "--out", str(tmp_path), "compare", write_doc(tmp_path, toy_doc))
    assert code == 0
    summary = json.loads((tmp_path / "compare_summary.json").read_text())
    assert summary["planned_fixed_costs"] == {"1": None, "2": 7.5}
    assert summary["planned_elastic_cost"] == 6.125
    assert summary["elastic_le_min_fixed"] is True
    assert "fixed:1,infeasible" in out


def test_compare_every_fixed_infeasible(capsys, tmp_path):
    code, _, _ = run(capsys, "--out", str(tmp_path), "compare", "fixed_all_infeasible")
    assert code == 0
    _, rows = read_csv(tmp_path / "compare.csv")
    by = {r["strategy"]: r for r in rows}
    fixed = [r for k, r in by.items() if k.startswith("fixed:")]
    assert len(fixed) == 4 and all(r["cost"] == "infeasible" for r in fixed)
    assert by["elastic"]["misses"] == "0"
    summary = json.loads((tmp_path / "compare_summary.json").read_text())
    assert summary["elastic_le_min_fixed"] is True
    assert set(summary["planned_fixed_costs"].values()) == {None}


def test_simulate_wall_time_drops_with_k(capsys, tmp_path):
    walls = {}
    for k in ("1", "100"):
        code, out, _ = run(capsys, "--out", str(tmp_path / k), "simulate", "ksuite_a", "--k", k)
        assert code == 0
        walls[k] = float(next(l.split()[1] for l in out.splitlines() if l.startswith("sim_wall_s")))
    assert walls["100"] < walls["1"]


def test_sweep_k(capsys, tmp_path):
    code, _, _ = run(capsys, "--out", str(tmp_path), "sweep", "ksuite_c", "--param", "k", "--values", "1,100")
    assert code == 0
    _, rows = read_csv(tmp_path / "sweep.csv")
    assert [r["value"] for r in rows] == ["1", "100"]
    assert float(rows[0]["cost"]) <= float(rows[1]["cost"])


def test_sweep_partial_agg(capsys, tmp_path):
    code, _, _ = run(capsys, "--out", str(tmp_path), "sweep", "partial_agg_b", "--param", "partial-agg",
                     "--values", "off,0.25")
    assert code == 0
    _, rows = read_csv(tmp_path / "sweep.csv")
    assert int(rows[1]["max_nodes"]) < int(rows[0]["max_nodes"])


# ---------------------------------------------------------------- fit

TRUE = dict(a_serial=2e-5, a_parallel=4e-3, b_fixed=3.0, b_per_node=8.0)


def _samples(path, header="nodes,tuples,seconds"):
    lines = [header]
    for n in (2, 4, 8, 16):
        for x in (1000, 20000, 100000):
            s = (TRUE["a_serial"] + TRUE["a_parallel"] / n) * x + TRUE["b_fixed"] + TRUE["b_per_node"] / n
            lines.append(f"{n},{x},{s!r}")
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_fit_round_trip(capsys, tmp_path):
    code, out, _ = run(capsys, "--out", str(tmp_path), "fit", _samples(tmp_path / "t.csv"))
    assert code == 0 and "residual_rms_s=" in out
    printed = dict(kv.split("=") for kv in out.split())
    for k, v in TRUE.items():
        assert float(printed[k]) == pytest.approx(v, rel=1e-6)
    doc = json.loads((tmp_path / "model.json").read_text())
    for k, v in TRUE.items():
        assert doc["proc"][k] == pytest.approx(v, rel=1e-6)
    assert doc["proc"]["valid_nodes"] == [2, 16]
    assert doc["samples"] == 12


def test_fit_bad_input(capsys, tmp_path):
    assert run(capsys, "fit", _samples(tmp_path / "t.csv", header="n,x,s"))[0] == 2
    one = tmp_path / "one.csv"
    one.write_text("nodes,tuples,seconds\n4,100,1.0\n")
    code, _, err = run(capsys, "fit", str(one))
    assert code == 2 and err
    two = tmp_path / "two.csv"
    two.write_text("nodes,tuples,seconds\n4,100,1.0\n4,200,2.0\n")
    assert run(capsys, "fit", str(two))[0] == 2
    assert run(capsys, "fit", str(tmp_path / "absent.csv"))[0] == 2


def test_module_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "elastiq", "--out", str(tmp_path), "simulate", "toy"],
                       capture_output=True, text=True, timeout=120)
    assert p.returncode == 0 and "cost 6.00" in p.stdout
