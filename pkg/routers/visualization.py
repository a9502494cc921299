from fastapi import APIRouter, Depends
from fastapi.responses import HTMLResponse
from sqlalchemy.orm import Session

from db.sqlite_setup import fetch_db_session
from pydantic_models.trajectory import TrajectoryQueryParams, trajectory_query_params
from visualizations import plots

visualization_router = APIRouter()


@visualization_router.get("/steps/", response_class=HTMLResponse)
def get_steps_visualization(
    query_params: TrajectoryQueryParams = Depends(trajectory_query_params),
    db_session: Session = Depends(fetch_db_session),
):
    html_plot = plots.steps_distribution(
        query_params=query_params, db_session=db_session
    )
    return HTMLResponse(content=html_plot)


@visualization_router.get("/rewards/", response_class=HTMLResponse)
def get_rewards_visualization(
    query_params: TrajectoryQueryParams = Depends(trajectory_query_params),
    db_session: Session = Depends(fetch_db_session),
):
    html_plot = plots.rewards_per_epoch(
        query_params=query_params, db_session=db_session
    )
    return HTMLResponse(content=html_plot)
