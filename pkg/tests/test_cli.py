import json
import math

import pandas as pd
import pytest

from src.lqtrack.app import refinement_checks
from src.lqtrack.config import EngineConfig
from src.lqtrack.data.loader import list_catalog
from src.lqtrack.main import main
from src.lqtrack.systems.artifacts import PROCESS_COLUMNS, TRAJECTORY_COLUMNS


def read_report(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_catalog_lists_scenarios(capsys):
    assert main(["--catalog"]) == 0
    out = capsys.readouterr().out
    assert "mixed_eta" in out
    assert "target_revealed_late" in out


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().out


def test_run_writes_artifacts(scenario_file, tmp_path):
    path = scenario_file()
    out = tmp_path / "out"
    assert main(["--out", str(out), "run", str(path)]) == 0

    target = out / "tiny"
    report = read_report(target / "report.json")
    assert report["metadata"]["scenario"] == "tiny"
    payload = report["payload"]
    assert payload["exit_code"] == 0
    assert all(c["passed"] for c in payload["checks"] if c["kind"] == "exact")

    processes = pd.read_csv(target / "processes.csv")
    assert list(processes.columns) == PROCESS_COLUMNS
    trajectories = pd.read_csv(target / "trajectories.csv")
    assert list(trajectories.columns) == TRAJECTORY_COLUMNS
    truncation = pd.read_csv(target / "truncation.csv")
    assert truncation["monotone"].all()
    assert (target / "perturbation.csv").exists()


def test_report_is_byte_stable(scenario_file, tmp_path):
    path = scenario_file()
    out = tmp_path / "out"
    assert main(["--out", str(out), "run", str(path)]) == 0
    first = (out / "tiny" / "report.json").read_bytes()
    assert main(["--out", str(out), "run", str(path)]) == 0
    assert (out / "tiny" / "report.json").read_bytes() == first


def test_negative_kappa_is_a_validation_failure(scenario_file, tmp_path):
    path = scenario_file(kappa=-1.0)
    assert main(["--out", str(tmp_path), "run", str(path)]) == 2
    assert not (tmp_path / "tiny" / "report.json").exists()


def test_bad_scenarios_exit_with_two(tmp_path):
    broken = tmp_path / "broken.yaml"
    broken.write_text("name: [unclosed\n", encoding="utf-8")
    assert main(["--out", str(tmp_path), "run", str(broken)]) == 2
    assert main(["--out", str(tmp_path), "run", "no_such_scenario"]) == 2


def test_sweep_over_truncation(scenario_file, tmp_path):
    path = scenario_file()
    assert main(["--out", str(tmp_path), "sweep", str(path), "--axis", "n"]) == 0
    frame = pd.read_csv(tmp_path / "tiny" / "sweep_n.csv")
    assert len(frame) == 4
    assert frame["monotone"].all()
    assert frame["c0"].is_monotonic_increasing


def test_sweep_over_perturbations(scenario_file, tmp_path):
    path = scenario_file()
    assert main(["--out", str(tmp_path), "sweep", str(path), "--axis", "perturbation"]) == 0
    frame = pd.read_csv(tmp_path / "tiny" / "sweep_perturbation.csv")
    assert len(frame) == 5
    assert frame["gap_error"].max() <= 1e-9
    assert (frame["domination_margin"] >= -1e-9).all()


def test_sweep_over_grid_size(tmp_path):
    assert main(["--out", str(tmp_path), "sweep", "target_revealed_late", "--axis", "N"]) == 0
    frame = pd.read_csv(tmp_path / "target_revealed_late" / "sweep_N.csv")
    assert list(frame["N"]) == [8, 16, 32, 64]
    assert frame["predictability"].is_monotonic_increasing


def test_unknown_axis_is_rejected():
    with pytest.raises(SystemExit):
        main(["sweep", "mixed_eta", "--axis", "T"])


@pytest.mark.parametrize("name", [name for name, _ in list_catalog()])
def test_catalog_scenarios_pass(name, tmp_path):
    assert main(["--out", str(tmp_path), "run", name]) == 0
    payload = read_report(tmp_path / name / "report.json")["payload"]
    failed = [c["name"] for c in payload["checks"] if not c["passed"] and c["kind"] != "soft"]
    assert failed == []


def test_flagship_walk_reports_feedback_cost(tmp_path):
    assert main(["--out", str(tmp_path), "run", "constant_liquidation"]) == 0
    payload = read_report(tmp_path / "constant_liquidation" / "report.json")["payload"]
    walk = payload["walk_controller"]
    assert walk["J_feedback"] == pytest.approx(1.0 / math.tanh(1.0), abs=0.05)
    assert walk["J_feedback"] == pytest.approx(walk["J_formula"], rel=1e-11)
    checks = {c["name"]: c for c in payload["checks"]}
    for name in ("walk_value_vs_oracle", "walk_terminal_attainment", "walk_liquidation_value"):
        assert checks[name]["passed"], name


@pytest.mark.parametrize("name", ["constant_liquidation", "constant_liquidation_tree"])
def test_refinement_reports_named_checks(name, tmp_path):
    assert main(["--out", str(tmp_path), "run", name]) == 0
    payload = read_report(tmp_path / name / "report.json")["payload"]
    checks = {c["name"]: c for c in payload["checks"]}
    assert checks["refinement_c0_error_rate"]["kind"] == "bound"
    for check in ("refinement_c0_error_rate", "refinement_terminal_miss_rate", "refinement_limit_attainment"):
        assert checks[check]["passed"], check
    # with n = N the feedback misses liquidation by at most x0 / (N sinh(1))
    assert 0 < payload["refinement"]["terminal_miss_C"] <= 1.0 / math.sinh(1.0)
    frame = pd.read_csv(tmp_path / name / "refinement.csv")
    assert (frame["terminal_miss_limit"] <= 1e-6).all()


def test_refinement_checks_flag_a_slow_c0_error():
    frame = pd.DataFrame(
        {
            "N": [4, 8],
            "c0_closed_form": [1.0, 1.0],
            "c0_error": [0.5, 1.0],
            "c0_error_times_N": [2.0, 8.0],
            "terminal_miss_times_N": [0.7, 0.8],
            "terminal_miss_limit": [0.0, 2e-6],
        }
    )
    checks = {c.name: c for c in refinement_checks(frame, 1e-6)}
    assert not checks["refinement_c0_error_rate"].passed
    assert checks["refinement_c0_error_rate"].tolerance == 3.0
    assert not checks["refinement_c0_error_decreasing"].passed
    assert checks["refinement_terminal_miss_rate"].passed
    assert checks["refinement_terminal_miss_rate"].value == 0.8
    assert not checks["refinement_limit_attainment"].passed


def test_engine_settings_leave_conventions_to_the_scenario(tmp_path, monkeypatch):
    monkeypatch.delenv("LQTRACK_THREADS", raising=False)
    for knob in ("constraint_tol", "jc_window", "extra"):
        with pytest.raises(AttributeError):
            EngineConfig.from_env(env_file=tmp_path / ".env", **{knob: 1})
    cfg = EngineConfig.from_env(env_file=tmp_path / ".env", threads=0, domination_tol=1e-8)
    assert cfg.threads == 1
    assert cfg.domination_tol == 1e-8
