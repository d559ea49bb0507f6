"""SQLAlchemy models for the run ledger."""

import uuid
from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Integer, String
from sqlalchemy.dialects.postgresql import JSONB
from sqlalchemy import JSON

from app.database import Base

# Prefer JSONB on Postgres, but fall back to generic JSON for SQLite.
JSONType = JSONB().with_variant(JSON, "sqlite")


class RunModel(Base):
    """One CLI invocation and the files it wrote."""

    __tablename__ = "runs"

    id = Column(String, primary_key=True, default=lambda: str(uuid.uuid4()))
    subcommand = Column(String, nullable=False, index=True)
    # u64 seeds overflow BIGINT
    seed = Column(String, nullable=False)
    config_digest = Column(String, nullable=False, index=True)
    status = Column(String, nullable=False)
    exit_code = Column(Integer, nullable=False)
    created_at = Column(DateTime(timezone=True), nullable=False, default=lambda: datetime.now(timezone.utc))
    outputs = Column(JSONType, nullable=False, default=list)
    summary = Column(JSONType, nullable=True)
