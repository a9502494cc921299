from fastapi import APIRouter, Depends, HTTPException
from sqlalchemy.orm import Session

from db.sqlite_setup import fetch_db_session
from pydantic_models.statistics import RunStatisticsResponse
from pydantic_models.trajectory import (
    PageRequest,
    PaginatedResponse,
    TrajectoryQueryParams,
    pagination_params,
    trajectory_query_params,
)
from sqlalchemy_schemas.trajectory import filter_trajectories
from statistics_handlers.run_stats import calculate_run_statistics

trajectory_router = APIRouter()


@trajectory_router.get("/", response_model=PaginatedResponse)
def get_trajectories(
    query_params: TrajectoryQueryParams = Depends(trajectory_query_params),
    pagination: PageRequest = Depends(pagination_params),
    db_session: Session = Depends(fetch_db_session),
):
    return filter_trajectories(
        query_params=query_params, pagination=pagination, db_session=db_session
    )


@trajectory_router.get("/statistics/", response_model=RunStatisticsResponse)
def get_statistics(
    query_params: TrajectoryQueryParams = Depends(trajectory_query_params),
    db_session: Session = Depends(fetch_db_session),
):
    try:
        return calculate_run_statistics(
            query_params=query_params, db_session=db_session
        )
    except ValueError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
