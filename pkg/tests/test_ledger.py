import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import json

import numpy as np
import pytest
from sqlalchemy.exc import SQLAlchemyError

from app.database import Base, engine, get_db
from app.ledger import (
    NoOpRunLedger,
    RunStatus,
    SqlRunLedger,
    build_run_entry,
    get_run_ledger,
    reset_run_ledger,
    status_for,
)
from app.main import run
from app.models import RunModel


@pytest.fixture(autouse=True)
def setup_database():
    Base.metadata.drop_all(bind=engine)
    Base.metadata.create_all(bind=engine)
    reset_run_ledger()
    yield
    reset_run_ledger()


class FailingSession:
    def __init__(self):
        self.rolled_back = False
        self.closed = False

    def add(self, _):
        pass

    def commit(self):
        raise SQLAlchemyError("disk full")

    def rollback(self):
        self.rolled_back = True

    def close(self):
        self.closed = True


def entry(**overrides):
    values = dict(subcommand="simulate-sde", seed=2**64 - 1, config_digest="abc", exit_code=0)
    values.update(overrides)
    return build_run_entry(**values)


def test_status_follows_exit_code():
    assert status_for(0) is RunStatus.OK
    assert status_for(3) is RunStatus.VERIFICATION_FAILED
    assert status_for(1) is RunStatus.FAILED
    assert status_for(2) is RunStatus.FAILED


def test_entry_keeps_large_seeds_and_plain_summaries():
    record = entry(outputs=[pathlib.Path("runs/trajectory.csv")], summary={"stopped": np.bool_(False), "x": np.float64(0.5)})
    assert record["seed"] == "18446744073709551615"
    assert record["outputs"] == ["runs/trajectory.csv"]
    assert json.dumps(record["summary"]) == '{"stopped": false, "x": 0.5}'
    assert entry(exit_code=3)["status"] == "verification-failed"


def test_sql_ledger_records_a_row():
    SqlRunLedger().record_run(entry(summary={"finalEnergies": [1.0, 1.0]}))
    db = next(get_db())
    try:
        rows = db.query(RunModel).all()
    finally:
        db.close()
    assert len(rows) == 1
    assert rows[0].status == "ok"
    assert rows[0].seed == "18446744073709551615"
    assert rows[0].summary == {"finalEnergies": [1.0, 1.0]}


def test_sql_ledger_wraps_database_errors():
    session = FailingSession()
    ledger = SqlRunLedger(lambda: session, create_tables=False)
    with pytest.raises(RuntimeError, match="disk full"):
        ledger.record_run(entry())
    assert session.rolled_back and session.closed


def test_ledger_backend_comes_from_environment(monkeypatch):
    monkeypatch.delenv("ENERGY_LAB_LEDGER", raising=False)
    assert isinstance(get_run_ledger(), NoOpRunLedger)
    reset_run_ledger()
    monkeypatch.setenv("ENERGY_LAB_LEDGER", "sql")
    assert isinstance(get_run_ledger(), SqlRunLedger)


def test_cli_runs_are_recorded(monkeypatch, tmp_path):
    monkeypatch.setenv("ENERGY_LAB_LEDGER", "sql")
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 9, "sde": {"tEnd": 0.01, "dt": 1e-3}}))
    assert run(["--config", str(config), "--output-dir", str(tmp_path / "out"), "simulate-sde"]) == 0
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"graph": {"kind": "file", "path": str(tmp_path / "nope.json")}}))
    assert run(["--config", str(broken), "--output-dir", str(tmp_path / "out"), "simulate-micro"]) == 2
    db = next(get_db())
    try:
        rows = {row.subcommand: row for row in db.query(RunModel).all()}
    finally:
        db.close()
    assert set(rows) == {"simulate-sde", "simulate-micro"}
    assert rows["simulate-sde"].seed == "9"
    assert rows["simulate-sde"].status == "ok"
    assert any(path.endswith("trajectory.csv") for path in rows["simulate-sde"].outputs)
    assert rows["simulate-micro"].status == "failed"
