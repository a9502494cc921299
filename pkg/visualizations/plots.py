from typing import Optional

import pandas as pd
import plotly.express as px
from sqlalchemy import func
from sqlalchemy.orm import Session

from pydantic_models.trajectory import TrajectoryQueryParams
from sqlalchemy_schemas.trajectory import TrajectoryRecord, filter_trajectory_query

NO_DATA = "<h3>No data available for the given query parameters</h3>"


def _to_html(fig, div_id: str) -> str:
    # a fixed div id keeps the rendered HTML identical across runs
    return fig.to_html(full_html=False, include_plotlyjs="cdn", div_id=div_id)


def steps_distribution(query_params: TrajectoryQueryParams, db_session: Session) -> str:
    result = (
        filter_trajectory_query(
            query_params=query_params,
            db_session=db_session,
            columns=[
                TrajectoryRecord.memory_policy,
                TrajectoryRecord.steps,
                func.count(TrajectoryRecord.id).label("count"),
            ],
        )
        .group_by(TrajectoryRecord.memory_policy, TrajectoryRecord.steps)
        .all()
    )
    db_session.close()
    if not result:
        return NO_DATA

    df = pd.DataFrame(result, columns=["memory_policy", "steps", "count"])
    return steps_figure(df)


def steps_figure(df: pd.DataFrame) -> str:
    """Bar chart of trajectory counts per number of reasoning steps and policy."""
    df = df.sort_values(by=["memory_policy", "steps"])
    fig = px.bar(
        df,
        x="steps",
        y="count",
        color="memory_policy",
        barmode="group",
        labels={"steps": "Reasoning Steps", "count": "Trajectories"},
        title="Distribution of Reasoning Steps",
    )
    fig.update_layout(xaxis=dict(type="category"))
    return _to_html(fig, "steps-distribution")


def rewards_per_epoch(query_params: TrajectoryQueryParams, db_session: Session) -> str:
    result = (
        filter_trajectory_query(
            query_params=query_params,
            db_session=db_session,
            columns=[
                TrajectoryRecord.memory_policy,
                TrajectoryRecord.epoch,
                func.avg(TrajectoryRecord.reward).label("exact_match"),
                func.avg(TrajectoryRecord.steps).label("mean_steps"),
            ],
        )
        .group_by(TrajectoryRecord.memory_policy, TrajectoryRecord.epoch)
        .all()
    )
    db_session.close()
    if not result:
        return NO_DATA

    df = pd.DataFrame(
        result, columns=["memory_policy", "epoch", "exact_match", "mean_steps"]
    )
    return epoch_figures(df, color="memory_policy")


def epoch_figures(df: pd.DataFrame, color: Optional[str] = None) -> str:
    """EM and mean reasoning steps over epochs, as two line charts."""
    df = df.sort_values(by="epoch")
    fig_em = px.line(
        df,
        x="epoch",
        y="exact_match",
        color=color,
        markers=True,
        labels={"epoch": "Epoch", "exact_match": "Exact Match"},
        title="Exact Match per Epoch",
    )
    fig_em.update_layout(yaxis=dict(range=[0, 1]))
    fig_steps = px.line(
        df,
        x="epoch",
        y="mean_steps",
        color=color,
        markers=True,
        labels={"epoch": "Epoch", "mean_steps": "Mean Reasoning Steps"},
        title="Mean Reasoning Steps per Epoch",
    )
    return _to_html(fig_em, "exact-match-per-epoch") + _to_html(
        fig_steps, "steps-per-epoch"
    )


def loss_curve(log: pd.DataFrame, title: str = "Training Loss") -> str:
    fig = px.line(
        log, x="step", y="loss", labels={"step": "Step", "loss": "Loss"}, title=title
    )
    return _to_html(fig, "loss-curve")
