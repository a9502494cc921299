from typing import Optional

from fastapi import Query
from pydantic import BaseModel, ConfigDict


class TrajectoryResponse(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    run_id: str
    trajectory_id: str
    question: str
    gold_answer: str
    final_action: str
    reward: float
    success: bool
    steps: int
    llm_calls: int
    mean_context_words: float
    bundle_version: int
    epoch: int
    memory_policy: str
    aborted: bool


class PaginatedResponse(BaseModel):
    total: int = 0
    page: int
    page_size: int
    results: list[TrajectoryResponse] = []


class PageRequest(BaseModel):
    page: int = 1
    page_size: int = 10


def pagination_params(
    page: int = Query(1, ge=1), page_size: int = Query(10, ge=1)
) -> PageRequest:
    return PageRequest(page=page, page_size=page_size)


class TrajectoryQueryParams(BaseModel):
    run_id: Optional[str] = None
    memory_policy: Optional[str] = None
    success: Optional[bool] = None
    epoch: Optional[int] = None
    min_steps: Optional[int] = None
    max_steps: Optional[int] = None


def trajectory_query_params(
    run_id: Optional[str] = Query(None),
    memory_policy: Optional[str] = Query(None),
    success: Optional[bool] = Query(None),
    epoch: Optional[int] = Query(None),
    min_steps: Optional[int] = Query(None, ge=0),
    max_steps: Optional[int] = Query(None, ge=0),
) -> TrajectoryQueryParams:
    return TrajectoryQueryParams(
        run_id=run_id,
        memory_policy=memory_policy,
        success=success,
        epoch=epoch,
        min_steps=min_steps,
        max_steps=max_steps,
    )
