"""Alembic migrations package."""
