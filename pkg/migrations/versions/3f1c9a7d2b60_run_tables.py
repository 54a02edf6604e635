"""Run and run record tables.

Revision ID: 3f1c9a7d2b60
Revises: 
Create Date: 2026-10-19 09:12:40.518233

"""
from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision = '3f1c9a7d2b60'
down_revision = None
branch_labels = None
depends_on = None


def upgrade():
    op.create_table('run',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('kind', sa.String(length=32), nullable=False),
    sa.Column('seed', sa.Integer(), nullable=False),
    sa.Column('created_at', sa.DateTime(), nullable=False),
    sa.Column('config', sa.Text(), nullable=False),
    sa.Column('metrics', sa.Text(), nullable=False),
    sa.PrimaryKeyConstraint('id')
    )
    with op.batch_alter_table('run', schema=None) as batch_op:
        batch_op.create_index(batch_op.f('ix_run_created_at'), ['created_at'], unique=False)
        batch_op.create_index(batch_op.f('ix_run_kind'), ['kind'], unique=False)

    op.create_table('run_record',
    sa.Column('id', sa.Integer(), nullable=False),
    sa.Column('run_id', sa.Integer(), nullable=False),
    sa.Column('question_id', sa.String(length=64), nullable=False),
    sa.Column('depth', sa.Integer(), nullable=True),
    sa.Column('predicted', sa.String(length=255), nullable=True),
    sa.Column('gold', sa.String(length=255), nullable=False),
    sa.Column('hit', sa.Boolean(), nullable=False),
    sa.Column('terminal', sa.String(length=32), nullable=True),
    sa.Column('select_calls', sa.Integer(), nullable=False),
    sa.Column('answer_calls', sa.Integer(), nullable=False),
    sa.Column('seconds', sa.Float(), nullable=False),
    sa.ForeignKeyConstraint(['run_id'], ['run.id'], ),
    sa.PrimaryKeyConstraint('id')
    )
    with op.batch_alter_table('run_record', schema=None) as batch_op:
        batch_op.create_index(batch_op.f('ix_run_record_run_id'), ['run_id'], unique=False)


def downgrade():
    with op.batch_alter_table('run_record', schema=None) as batch_op:
        batch_op.drop_index(batch_op.f('ix_run_record_run_id'))

    op.drop_table('run_record')
    with op.batch_alter_table('run', schema=None) as batch_op:
        batch_op.drop_index(batch_op.f('ix_run_kind'))
        batch_op.drop_index(batch_op.f('ix_run_created_at'))

    op.drop_table('run')
