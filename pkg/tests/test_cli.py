import json
import subprocess
import sys

import numpy as np
import pytest

from mflq import cli, portfolio
from mflq.model import make_problem, problem_to_dict

from conftest import random_instance, scalar_standard


def _write(tmp_path, spec, name="problem.json"):
    path = tmp_path / name
    path.write_text(json.dumps(problem_to_dict(spec)))
    return str(path)


def _run(argv, out):
    code = cli.main(argv + ["--out", str(out)])
    return code, json.loads((out / "report.json").read_text())


def test_check(tmp_path):
    path = _write(tmp_path, portfolio.build(portfolio.reference_market("initial"), 20))
    code, rep = _run(["check", path], tmp_path)
    assert code == 0 and rep["status"] == "ok"
    assert rep["case"]["variant"] == "Singular"
    assert rep["feasibility"]["feasible_for_all_d"] and rep["verdicts"]["type2"]
    assert (tmp_path / "riccati.csv").exists()


def test_solve_outputs(tmp_path):
    path = _write(tmp_path, scalar_standard(x0=[1.0]))
    code, rep = _run(["solve", path], tmp_path)
    assert code == 0
    assert rep["certificate"]["d_star"][0] == pytest.approx(0.6422007040598737, abs=1e-8)
    assert rep["manifest"] == {"command": "solve", "input_path": path,
                               "overrides": {"substeps": 8, "quadrature": "rk4"}}
    header = (tmp_path / "feedback.csv").read_text().splitlines()[0]
    assert header == "t,Theta11,u0_1"
    assert (tmp_path / "riccati.csv").read_text().startswith("t,P11\n")


def test_infeasible_exit_code(tmp_path):
    spec = make_problem(1.0, 10, [1.0], A=[[0.0]], B=[[0.0]], D=[[1.0]], R=[[1.0]], G=[[1.0]])
    code, rep = _run(["solve", _write(tmp_path, spec)], tmp_path)
    assert code == 2 and rep["status"] == "error"
    assert rep["reason"] == "infeasible: integral_norm=0"


def test_unsolvable_exit_code(tmp_path, capsys):
    code, rep = _run(["solve", _write(tmp_path, scalar_standard(Gbar=[[-50.0]], xi=[1.0]))], tmp_path)
    assert code == 2 and rep["reason"].startswith("unsolvable")
    assert rep["reason"] in capsys.readouterr().err


@pytest.mark.parametrize("content", ["{not json", json.dumps({"horizon": 1, "steps": 3})])
def test_bad_input_exit_code(tmp_path, content):
    path = tmp_path / "bad.json"
    path.write_text(content)
    code, rep = _run(["solve", str(path)], tmp_path)
    assert code == 1 and rep["status"] == "error"


def test_missing_file_and_usage(tmp_path):
    code, _ = _run(["solve", str(tmp_path / "absent.json")], tmp_path)
    assert code == 1
    assert cli.main(["solve"]) == 1
    assert cli.main(["sweep", "--preset", "initial", "--element", "9,9", "--out", str(tmp_path)]) == 1


def test_simulate_identical_across_workers(tmp_path):
    path = _write(tmp_path, random_instance(np.random.default_rng(3), n=2, m=1, steps=10))
    reports = []
    for w in (1, 2, 8):
        out = tmp_path / f"w{w}"
        code = cli.main(["simulate", path, "--paths", "3000", "--steps", "40", "--seed", "11",
                         "--workers", str(w), "--out", str(out)])
        assert code == 0
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1] == reports[2]
    sim = json.loads(reports[0])["simulation"]
    assert sim["n_paths"] == 3000 and len(sim["z_mean_XT"]) == 2


def test_simulate_paths_csv(tmp_path):
    path = _write(tmp_path, scalar_standard(steps=5, x0=[1.0]))
    code, _ = _run(["simulate", path, "--paths", "20", "--keep-paths", "2", "--antithetic"], tmp_path)
    assert code == 0
    lines = (tmp_path / "paths.csv").read_text().splitlines()
    assert lines[0] == "path,t,x1" and len(lines) == 1 + 2 * 6


def test_mv_preset(tmp_path):
    code, rep = _run(["mv", "--preset", "initial"], tmp_path)
    assert code == 0
    assert rep["closed_form"]["value"] == pytest.approx(rep["closed_form"]["minus_pipeline_value"], abs=1e-6)
    assert rep["case"]["variant"] == "Singular"


def test_mv_file_with_sigma3(tmp_path):
    path = tmp_path / "market.json"
    path.write_text(json.dumps(portfolio.reference_market("benchmark").to_dict()))
    code, rep = _run(["mv", str(path), "--sigma3"], tmp_path)
    assert code == 0 and rep["market"]["sigma"][2] == 0.3
    code, _ = _run(["mv", str(path), "--preset", "initial"], tmp_path)
    assert code == 1


def test_sweep(tmp_path):
    code, rep = _run(["sweep", "--preset", "initial", "--element", "2,2", "--points", "7", "--steps", "10"],
                     tmp_path)
    assert code == 0 and rep["element"] == "Sigma22" and rep["verdict"]["ok"]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 8


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["mv", "--preset", "benchmark", "--steps", "10"]) == 0
    assert (tmp_path / "env" / "report.json").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mflq.cli", "mv", "--preset", "initial", "--steps", "10",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
