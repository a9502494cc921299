from typing import Optional

from sqlalchemy import Boolean, Column, Float, Index, Integer, String
from sqlalchemy.orm import Session

from db.sqlite_setup import Base
from pydantic_models.trajectory import (
    PageRequest,
    PaginatedResponse,
    TrajectoryQueryParams,
    TrajectoryResponse,
)


class TrajectoryRecord(Base):
    __tablename__ = "trajectories"
    id = Column(Integer, primary_key=True, autoincrement="auto")
    run_id = Column(String, index=True)
    trajectory_id = Column(String)
    question = Column(String)
    gold_answer = Column(String)
    final_action = Column(String)
    reward = Column(Float)
    success = Column(Boolean)
    steps = Column(Integer)
    llm_calls = Column(Integer)
    mean_context_words = Column(Float)
    bundle_version = Column(Integer)
    epoch = Column(Integer)
    memory_policy = Column(String)
    aborted = Column(Boolean)

    __table_args__ = (
        Index("ix_trajectories_run_id_epoch", "run_id", "epoch"),
    )


def filter_trajectories(
    query_params: Optional[TrajectoryQueryParams],
    pagination: PageRequest,
    db_session: Session,
) -> PaginatedResponse:
    query = filter_trajectory_query(query_params=query_params, db_session=db_session)
    count = query.count()
    records = (
        query.order_by(TrajectoryRecord.id)
        .offset((pagination.page - 1) * pagination.page_size)
        .limit(pagination.page_size)
        .all()
    )
    db_session.close()

    return PaginatedResponse(
        page=pagination.page,
        page_size=pagination.page_size,
        total=count,
        results=[TrajectoryResponse.model_validate(record) for record in records],
    )


def filter_trajectory_query(
    query_params: Optional[TrajectoryQueryParams],
    db_session: Session,
    columns: Optional[list] = None,
):
    if columns:
        query = db_session.query(*columns)
    else:
        query = db_session.query(TrajectoryRecord)
    if query_params is None:
        return query

    if query_params.run_id is not None:
        query = query.filter(TrajectoryRecord.run_id == query_params.run_id)
    if query_params.memory_policy is not None:
        query = query.filter(
            TrajectoryRecord.memory_policy == query_params.memory_policy
        )
    if query_params.success is not None:
        query = query.filter(TrajectoryRecord.success == query_params.success)
    if query_params.epoch is not None:
        query = query.filter(TrajectoryRecord.epoch == query_params.epoch)

    # reasoning-step bounds are inclusive
    if query_params.min_steps is not None:
        query = query.filter(TrajectoryRecord.steps >= query_params.min_steps)
    if query_params.max_steps is not None:
        query = query.filter(TrajectoryRecord.steps <= query_params.max_steps)

    return query
