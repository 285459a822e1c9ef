import csv
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from troughfill.cli import COMPARISON_FIELDS, main
from troughfill.traces import data_path


def write_config(tmp_path, **over):
    d = {"scenario": {"kind": "synthetic", "n_states": 20},
         "controllers": [{"policy": "qtf", "v": 1000}],
         "horizon": 200, "seed": 0, "output": "out"}
    d.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def schema():
    with open(data_path("summary.schema.json")) as fh:
        return json.load(fh)


def test_minimal_run(tmp_path, schema, capsys):
    cfg = write_config(tmp_path, horizon=1000, scenario={"kind": "synthetic"})
    assert main(["run", cfg]) == 0
    run_dir = tmp_path / "out" / "runs" / "qtf-v1000"
    rows = read_csv(run_dir / "metrics.csv")
    assert len(rows) == 1000
    assert list(rows[0])[:4] == ["t", "cost_total", "energy", "shift"]
    summary = json.loads((run_dir / "summary.json").read_text())
    jsonschema.validate(summary, schema)
    assert summary["checks"]["replay_error"] == 0.0
    table = read_csv(tmp_path / "out" / "comparison.csv")
    assert len(table) == 1 and list(table[0]) == COMPARISON_FIELDS
    assert "qtf-v1000: avg_cost=" in capsys.readouterr().out


def test_sweep_makes_one_dir_per_point(tmp_path, schema):
    cfg = write_config(tmp_path, sweep=[{"param": "controllers.0.v", "values": [1, 1000]}])
    assert main(["run", cfg, "--jobs", "1"]) == 0
    runs = sorted(os.listdir(tmp_path / "out" / "runs"))
    assert runs == ["000-qtf-v1", "001-qtf-v1000"]
    table = read_csv(tmp_path / "out" / "comparison.csv")
    assert [r["run"] for r in table] == runs
    assert json.loads(table[1]["sweep"]) == {"controllers.0.v": 1000}
    for r in runs:
        jsonschema.validate(json.loads((tmp_path / "out" / "runs" / r / "summary.json").read_text()), schema)


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, controllers=[{"policy": "qtf", "v": 10}, {"policy": "sstf"}, {"policy": "bes"}])
    assert main(["run", cfg, "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert main(["run", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for name in ("qtf-v10", "sstf", "bes"):
        a = (tmp_path / "a" / "runs" / name / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "runs" / name / "metrics.csv").read_bytes()
        assert a == b
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()


def test_seed_override_changes_output(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["run", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", cfg, "--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    a = (tmp_path / "a" / "runs" / "qtf-v1000" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "runs" / "qtf-v1000" / "metrics.csv").read_bytes()
    assert a != b


def test_compare_adds_bounds(tmp_path, schema):
    cfg = write_config(tmp_path, controllers=[{"policy": "ossi"}, {"policy": "sstf"}, {"policy": "qtf", "v": 1000}])
    assert main(["compare", cfg]) == 0
    table = {r["controller"]: r for r in read_csv(tmp_path / "out" / "comparison.csv")}
    assert float(table["ossi"]["g_star"]) > 0
    assert table["ossi"]["queue_bound"] == ""
    q = table["qtf-v1000"]
    assert float(q["cost_bound"]) >= float(q["g_star"])
    assert float(q["avg_cost"]) <= float(q["cost_bound"])
    s = json.loads((tmp_path / "out" / "runs" / "qtf-v1000" / "summary.json").read_text())
    jsonschema.validate(s, schema)
    assert s["bounds"]["b_const"] > 0


def test_trace_run(tmp_path):
    cfg = write_config(tmp_path, scenario={"kind": "trace", "packet": {"size_threshold": 50}},
                       controllers=[{"policy": "bes"}, {"policy": "sstf", "lam": "estimated-from-trace"}],
                       horizon=30)
    assert main(["run", cfg]) == 0
    assert len(read_csv(tmp_path / "out" / "runs" / "bes" / "metrics.csv")) == 30


@pytest.mark.parametrize("over", [
    {"controllers": [{"policy": "qtf", "v": 0}]},
    {"scenario": {"kind": "trace", "packet_log": "missing.csv"}},
    {"horizon": "long"},
])
def test_config_errors_exit_1(tmp_path, over, capsys):
    assert main(["run", write_config(tmp_path, **over)]) == 1
    assert capsys.readouterr().err.startswith("config error: ")


def test_runtime_failure_exits_2_and_keeps_other_runs(tmp_path, capsys):
    # OSSI cannot run on a trace scenario; the BES run still completes
    cfg = write_config(tmp_path, scenario={"kind": "trace"}, controllers=[{"policy": "bes"}, {"policy": "ossi"}],
                       horizon=20)
    assert main(["run", cfg, "--jobs", "1"]) == 2
    table = {r["controller"]: r for r in read_csv(tmp_path / "out" / "comparison.csv")}
    assert table["bes"]["error"] == "" and "DomainError" in table["ossi"]["error"]
    assert os.path.isfile(tmp_path / "out" / "runs" / "bes" / "metrics.csv")
    assert "ossi: FAILED" in capsys.readouterr().out


def test_rates(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["run", cfg]) == 0
    run_dir = str(tmp_path / "out" / "runs" / "qtf-v1000")
    assert main(["rates", run_dir, "--window", "200", "--window", "1"]) == 0
    whole = read_csv(os.path.join(run_dir, "rates_w200.csv"))
    assert len(whole) == 1 and list(whole[0])[:2] == ["window_index", "start_slot"]
    summary = json.loads(open(os.path.join(run_dir, "summary.json")).read())
    served = read_csv(os.path.join(run_dir, "metrics.csv"))
    total = sum(float(r["served_1"]) for r in served)
    assert float(whole[0]["rate_1"]) == pytest.approx(total / (summary["lambda"][0] * 200), rel=1e-12)
    assert len(read_csv(os.path.join(run_dir, "rates_w1.csv"))) == 200
    assert main(["rates", run_dir, "--window", "201"]) == 1
    assert main(["rates", str(tmp_path / "nowhere")]) == 1


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, horizon=20)
    out = subprocess.run([sys.executable, "-m", "troughfill.cli", "run", cfg], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    bad = subprocess.run([sys.executable, "-m", "troughfill.cli", "run", str(tmp_path / "none.json")],
                         capture_output=True, text=True)
    assert bad.returncode == 1
