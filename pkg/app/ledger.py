from __future__ import annotations

import json
import logging
import os
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Protocol, Sequence

from sqlalchemy.exc import SQLAlchemyError

logger = logging.getLogger(__name__)


class RunStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"
    VERIFICATION_FAILED = "verification-failed"


class RunLedger(Protocol):
    def record_run(self, entry: dict[str, Any]) -> None: ...


def _plain(value: Any) -> Any:
    # numpy scalars and paths in summaries
    return value.item() if hasattr(value, "item") else str(value)


def status_for(exit_code: int) -> RunStatus:
    if exit_code == 0:
        return RunStatus.OK
    if exit_code == 3:
        return RunStatus.VERIFICATION_FAILED
    return RunStatus.FAILED


def build_run_entry(
    *,
    subcommand: str,
    seed: int,
    config_digest: str,
    exit_code: int,
    outputs: Sequence[Path | str] = (),
    summary: dict[str, Any] | None = None,
) -> dict[str, Any]:
    return {
        "subcommand": subcommand,
        "seed": str(seed),
        "config_digest": config_digest,
        "status": status_for(exit_code).value,
        "exit_code": exit_code,
        "created_at": datetime.now(timezone.utc),
        "outputs": [str(path) for path in outputs],
        "summary": json.loads(json.dumps(summary, default=_plain)) if summary is not None else None,
    }


class NoOpRunLedger:
    def record_run(self, entry: dict[str, Any]) -> None:
        return None


class SqlRunLedger:
    def __init__(self, session_factory=None, *, create_tables: bool = True):
        from app.database import Base, SessionLocal, engine

        self.session_factory = session_factory or SessionLocal
        if create_tables:
            Base.metadata.create_all(bind=engine)

    def record_run(self, entry: dict[str, Any]) -> None:
        from app.models import RunModel

        session = self.session_factory()
        try:
            session.add(RunModel(**entry))
            session.commit()
        except SQLAlchemyError as exc:
            session.rollback()
            raise RuntimeError(f"Failed to record run in ledger: {exc}") from exc
        finally:
            session.close()
        logger.info("ledger: recorded %s run (%s)", entry["subcommand"], entry["status"])


_ledger: RunLedger | None = None


def get_run_ledger() -> RunLedger:
    global _ledger
    if _ledger is None:
        backend = os.getenv("ENERGY_LAB_LEDGER", "none").lower()
        if backend == "sql":
            _ledger = SqlRunLedger()
        else:
            _ledger = NoOpRunLedger()
    return _ledger


def reset_run_ledger() -> None:
    global _ledger
    _ledger = None
