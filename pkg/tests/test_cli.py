import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import json

import pytest

from app.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from app.ledger import reset_run_ledger


@pytest.fixture(autouse=True)
def no_ledger(monkeypatch):
    monkeypatch.delenv("ENERGY_LAB_LEDGER", raising=False)
    reset_run_ledger()
    yield
    reset_run_ledger()


def write_config(directory, document):
    path = directory / "config.json"
    path.write_text(json.dumps(document))
    return str(path)


SMALL_SDE = {"seed": 3, "sde": {"tEnd": 0.01, "dt": 1e-4, "recordStride": 10}}


def test_usage_errors_exit_with_one(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["integrate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_help_exits_cleanly():
    assert run(["--help"]) == EXIT_OK


def test_missing_or_invalid_config_exits_with_one(tmp_path):
    assert run(["--config", str(tmp_path / "absent.json"), "simulate-sde"]) == EXIT_USAGE
    bad = write_config(tmp_path, {"sde": {"tEnd": -1}})
    assert run(["--config", bad, "--output-dir", str(tmp_path / "out"), "simulate-sde"]) == EXIT_USAGE


def test_simulate_sde_writes_trajectory_with_seed_and_digest(tmp_path):
    config = write_config(tmp_path, SMALL_SDE)
    out = tmp_path / "out"
    assert run(["--config", config, "--output-dir", str(out), "simulate-sde"]) == EXIT_OK
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "# seed=3"
    assert lines[1].startswith("# config_digest=")
    assert lines[2] == "t,E_0,E_1"
    assert (out / "trajectory.json").exists()


def test_simulate_sde_is_reproducible(tmp_path):
    config = write_config(tmp_path, SMALL_SDE)
    first, second = tmp_path / "first", tmp_path / "second"
    assert run(["--config", config, "--output-dir", str(first), "simulate-sde"]) == EXIT_OK
    assert run(["--config", config, "--output-dir", str(second), "simulate-sde"]) == EXIT_OK
    assert (first / "trajectory.csv").read_bytes() == (second / "trajectory.csv").read_bytes()
    third = tmp_path / "third"
    assert run(["--config", config, "--seed", "4", "--output-dir", str(third), "simulate-sde"]) == EXIT_OK
    assert (third / "trajectory.csv").read_text().startswith("# seed=4")


def test_simulate_sde_ensemble(tmp_path):
    config = write_config(tmp_path, {"sde": {"tEnd": 0.01, "dt": 1e-3, "ensemble": 5, "batchSize": 2}})
    out = tmp_path / "out"
    assert run(["--config", config, "--output-dir", str(out), "--workers", "2", "simulate-sde"]) == EXIT_OK
    assert (out / "ensemble.csv").exists()


def test_missing_graph_file_is_a_runtime_error(tmp_path):
    config = write_config(tmp_path, {"graph": {"kind": "file", "path": str(tmp_path / "nope.json")}})
    assert run(["--config", config, "--output-dir", str(tmp_path / "out"), "simulate-sde"]) == EXIT_RUNTIME


def test_verify_writes_reports(tmp_path):
    config = write_config(tmp_path, {"verify": {"checks": ["coefficients"]}})
    out = tmp_path / "out"
    assert run(["--config", config, "--output-dir", str(out), "verify"]) == EXIT_OK
    reports = json.loads((out / "reports.json").read_text())
    assert reports["passed"] is True
    assert (out / "summary.csv").exists()


def test_verify_with_unknown_check_is_a_runtime_error(tmp_path):
    config = write_config(tmp_path, {"verify": {"checks": ["astrology"]}})
    assert run(["--config", config, "--output-dir", str(tmp_path / "out"), "verify"]) == EXIT_RUNTIME


def test_estimate_sigma_writes_lag_sum_and_oracle(tmp_path):
    document = {"greenkubo": {"observable": "cos1", "lagMax": 10, "sigmaEnsemble": 2000, "oracleSteps": 50, "oracleEnsemble": 200}}
    out = tmp_path / "out"
    assert run(["--config", write_config(tmp_path, document), "--output-dir", str(out), "estimate-sigma"]) == EXIT_OK
    payload = json.loads((out / "sigma.json").read_text())
    assert payload["observable"] == "cos1"
    assert payload["lagSum"]["value"] == pytest.approx(0.5, abs=0.15)
    assert payload["lagSum"]["tail_in_value"] is False
    assert "configDigest" in payload


def test_simulate_micro_torus_writes_slow_paths(tmp_path):
    document = {"micro": {"backend": "torus", "epsilon": 0.1, "tSlow": 0.2, "ensemble": 20, "samples": 2}}
    out = tmp_path / "out"
    assert run(["--config", write_config(tmp_path, document), "--output-dir", str(out), "simulate-micro"]) == EXIT_OK
    assert (out / "slow_paths.csv").read_text().startswith("# seed=")


@pytest.mark.parametrize(
    "document",
    [
        {"graph": {"n": 3}, "micro": {"initialEnergies": [1.0, 1.0]}},
        {"sde": {"dt": 0.6}, "micro": {"tSlow": 0.5}},
    ],
)
def test_compare_reports_mismatched_sections_as_config_errors(tmp_path, capsys, document):
    config = write_config(tmp_path, document)
    assert run(["--config", config, "--output-dir", str(tmp_path / "out"), "compare"]) == EXIT_USAGE
    assert "compare:" in capsys.readouterr().err
    assert not (tmp_path / "out" / "compare.json").exists()
