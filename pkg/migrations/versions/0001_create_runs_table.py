"""Create runs table for the run ledger."""

from alembic import op
import sqlalchemy as sa
from sqlalchemy.dialects import postgresql

# revision identifiers, used by Alembic.
revision = "0001_create_runs_table"
down_revision = None
branch_labels = None
depends_on = None


json_type = sa.JSON().with_variant(postgresql.JSONB(astext_type=sa.Text()), "postgresql")


def upgrade() -> None:
    op.create_table(
        "runs",
        sa.Column("id", sa.String(), nullable=False),
        sa.Column("subcommand", sa.String(), nullable=False),
        sa.Column("seed", sa.String(), nullable=False),
        sa.Column("config_digest", sa.String(), nullable=False),
        sa.Column("status", sa.String(), nullable=False),
        sa.Column("exit_code", sa.Integer(), nullable=False),
        sa.Column("created_at", sa.DateTime(timezone=True), nullable=False),
        sa.Column("outputs", json_type, nullable=False),
        sa.Column("summary", json_type, nullable=True),
        sa.PrimaryKeyConstraint("id"),
    )
    op.create_index(op.f("ix_runs_subcommand"), "runs", ["subcommand"], unique=False)
    op.create_index(op.f("ix_runs_config_digest"), "runs", ["config_digest"], unique=False)


def downgrade() -> None:
    op.drop_index(op.f("ix_runs_config_digest"), table_name="runs")
    op.drop_index(op.f("ix_runs_subcommand"), table_name="runs")
    op.drop_table("runs")
