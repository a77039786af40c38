"""Command line interface."""

import csv
import json
import subprocess
import sys

import pytest

from dstr import cli

GRID = {"formation": {"kind": "hex_grid", "rows": 2, "cols": 3}, "protocol": {"dss": 4}}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "grid.json"
    p.write_text(json.dumps(GRID))
    return str(p)


def test_run_prints_result(cfg, capsys):
    assert cli.main(["run", "--config", cfg, "--seed", "3"]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["converged"] and out["valid"] and out["seed"] == 3 and "trace" not in out


def test_run_trace_then_validate(cfg, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--trace"]) == cli.EXIT_OK
    trace = tmp_path / "r.trace.jsonl"
    assert trace.exists()
    rows = [json.loads(x) for x in trace.read_text().splitlines()]
    assert {"superframe", "uav", "state", "claimed_slot", "superframe_size", "event"} == set(rows[0])
    for path in (out, trace):
        assert cli.main(["validate", str(path), "--config", cfg]) == cli.EXIT_OK
        assert json.loads(capsys.readouterr().out)["valid"] is True


def test_validate_detects_bad_schedule(tmp_path, capsys):
    sched = tmp_path / "s.csv"
    sched.write_text("uav,slot\n0,1\n1,1\n")
    code = cli.main(["validate", str(sched), "--single-hop", "2"])
    assert code == cli.EXIT_INVALID
    assert json.loads(capsys.readouterr().out)["valid"] is False


def test_baseline_round_trip(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert cli.main(["baseline", "--single-hop", "5", "--out", str(out)]) == cli.EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["slot_count"] == 5 and info["valid"]
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 5
    assert cli.main(["validate", str(out), "--single-hop", "5"]) == cli.EXIT_OK


def test_gen_topology_rings(tmp_path):
    out = tmp_path / "pos.csv"
    assert cli.main(["gen-topology", "--rings", "9", "--out", str(out)]) == cli.EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "id,x,y,z" and len(lines) == 272


def test_sweep(tmp_path):
    exp = {"scenario": GRID, "grid": {"ct": [3, 7], "gm": [1, 3]}, "reps": 2}
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(exp))
    out = tmp_path / "runs.csv"
    assert cli.main(["sweep", "--config", str(p), "--out", str(out)]) == cli.EXIT_OK
    assert len(out.read_text().splitlines()) == 1 + 8
    assert (tmp_path / "runs.summary.json").exists()


@pytest.mark.parametrize("body", [
    '{"scenario": {"formation": {"kind": "hex_grid", "rows": 2, "cols": 2}}, "grid": {}}',
    '{"scenario": {"formation": {"kind": "hex_grid", "rows": 2, "cols": 2}}, "bogus": 1}',
    '{"scenario": ',
])
def test_sweep_config_errors(tmp_path, body, capsys):
    p = tmp_path / "exp.json"
    p.write_text(body)
    assert cli.main(["sweep", "--config", str(p)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_not_converged_exit(cfg, capsys):
    assert cli.main(["run", "--config", cfg, "--stop", "convergence"]) == cli.EXIT_OK
    tight = dict(GRID, max_slots=30)
    p = cfg.replace("grid.json", "tight.json")
    with open(p, "w") as fh:
        json.dump(tight, fh)
    assert cli.main(["run", "--config", p]) == cli.EXIT_NOT_CONVERGED


def test_bad_flags():
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", "x.json", "--stop", "never"])
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", "x.json", "--seed", "-1"])
    assert cli.main(["gen-topology", "--rings", "2", "--rows", "3"]) == cli.EXIT_CONFIG


def test_entry_point_installed():
    proc = subprocess.run([sys.executable, "-m", "dstr.cli", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout


def test_stalled_run_exit(tmp_path, capsys):
    conf = {"formation": {"kind": "hex_grid", "rows": 10, "cols": 10},
            "protocol": {"tsr": 0.75, "ct": 7, "gm": 9, "st": 10, "dss": 10},
            "seed": 2135364021, "stop": "resolution"}
    p = tmp_path / "stall.json"
    p.write_text(json.dumps(conf))
    assert cli.main(["run", "--config", str(p)]) == cli.EXIT_NOT_CONVERGED
    out = json.loads(capsys.readouterr().out)
    assert out["stalled"] and out["resolution_slot"] is None
