import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from harnacklab.bench import PROBLEM_NAMES
from harnacklab.cli import ScenarioError, load_scenario, main, parse_number
from harnacklab.field import Grid, margin_for_order

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

BASE = """\
version: 1
name: tiny
dim: 2
grid_h: 1/16
problems: [{problems}]
ell: [1, 2]
q: [0.5]
eps_schedule: {eps}
structure_samples: 500
seed: 0
output_dir: {out}
"""


def write_scenario(tmp_path, problems="quad_full", eps="[1.0e-1, 1.0e-2]", extra=""):
    path = tmp_path / "sc.yaml"
    path.write_text(BASE.format(problems=problems, eps=eps, out=tmp_path / "out") + extra)
    return path


def test_parse_number():
    assert parse_number("1/32") == 1 / 32
    assert parse_number(0.25) == 0.25
    assert parse_number("1e-3") == 1e-3


def test_shipped_scenarios_load():
    for path in sorted(SCENARIOS.glob("*.yaml")):
        sc = load_scenario(path)
        assert sc.dim in (2, 3) and set(sc.problems) <= set(PROBLEM_NAMES)


def test_run_quad_full(tmp_path, capsys):
    assert main(["run", str(SCENARIOS / "quad_full_n2.yaml"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["summary"]["passed"]
    assert len(report["entries"]) == 6
    for e in report["entries"]:
        assert e["verdict"] == "RATIO" and abs(e["ratio"] - 1) <= 10 / 32
    assert (tmp_path / "timings.json").exists()
    assert "quad_full_n2: ok" in capsys.readouterr().out


def test_run_controls_expected_failures(tmp_path):
    assert main(["run", str(SCENARIOS / "controls_n2.yaml"), "--out", str(tmp_path), "--grid-h", "1/16"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    rc = [e for e in report["entries"] if e["problem"] == "rank_control"]
    assert any(e["status"] == "EXPECTED_FAIL" and e["verdict"] == "INCONSISTENT" for e in rc)
    prob = {p["problem"]: p for p in report["problems"]}
    assert prob["rank_control"]["rank_status"] == "EXPECTED_FAIL"
    assert prob["quad_rank1"]["rank_verdict"] == "CONSTANT(1)"
    assert [b["sizes"] for b in prob["logdet_flat"]["block_structures"]] == [[2]]
    assert [b["sizes"] for b in prob["quad_rank1"]["block_structures"]] == [[1, 1]]
    assert report["grid"]["h"] == 1 / 16


def test_undeclared_control_fails(tmp_path):
    path = write_scenario(tmp_path, problems="rank_control")
    assert main(["run", str(path)]) == 1
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert not report["summary"]["passed"]
    assert any("NONCONSTANT" in f for f in report["summary"]["failures"])


def test_bad_eps_schedule_exit_2(tmp_path, capsys):
    path = write_scenario(tmp_path, eps="[1.0e-2, 1.0e-1]")
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "eps_schedule" in err and "line 8" in err


def test_yaml_syntax_error_exit_2(tmp_path, capsys):
    path = tmp_path / "broken.yaml"
    path.write_text("version: 1\nname: [unclosed\ndim: 2\n")
    assert main(["run", str(path)]) == 2
    assert "line" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    path = write_scenario(tmp_path, extra="colour: blue\n")
    with pytest.raises(ScenarioError, match="colour"):
        load_scenario(path)


def test_bad_expect_rejected(tmp_path):
    path = write_scenario(tmp_path, extra="expect:\n  quad_full:\n    rank: CONSTANT\n")
    with pytest.raises(ScenarioError):
        load_scenario(path)


def test_report_deterministic_and_seed_override(tmp_path):
    path = write_scenario(tmp_path, problems="quad_full, poisson_concave")
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["run", str(path), "--out", str(a)]) == 0
    assert main(["run", str(path), "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert main(["run", str(path), "--out", str(c), "--seed", "7"]) == 0
    report = json.loads((c / "report.json").read_text())
    assert report["seed"] == 7 and all(e["seed"] == 7 for e in report["entries"])


def _table(path):
    header = path.read_text().splitlines()[0].split(",")
    return header, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def test_dump_quad_rank1(tmp_path):
    assert main(["dump", "quad_rank1", str(tmp_path), "--grid-h", "1/8"]) == 0
    header, spec = _table(tmp_path / "spectrum.csv")
    assert header[:2] == ["x_1", "x_2"] and "lambda_1" in header
    np.testing.assert_allclose(spec[:, header.index("lambda_1")], 0.0, atol=1e-12)
    assert np.all(spec[:, header.index("rank")] == 1)


def test_dump_quad_full_and_row_counts(tmp_path):
    assert main(["dump", "quad_full", str(tmp_path / "qf"), "--dim", "3", "--grid-h", "1/8"]) == 0
    header, spec = _table(tmp_path / "qf" / "spectrum.csv")
    assert np.all(spec[:, header.index("rank")] == 3)
    g = Grid(2, 1 / 16)
    assert main(["dump", "poisson_concave", str(tmp_path / "pc")]) == 0
    _, u = _table(tmp_path / "pc" / "u.csv")
    _, spec = _table(tmp_path / "pc" / "spectrum.csv")
    assert len(u) == len(g)
    assert len(spec) == len(g.shrink(margin_for_order(2, 2)))


def test_list_problems(capsys):
    assert main(["list-problems"]) == 0
    assert capsys.readouterr().out.split() == list(PROBLEM_NAMES)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "harnacklab", "list-problems"], capture_output=True, text=True)
    assert proc.returncode == 0 and "quad_full" in proc.stdout
