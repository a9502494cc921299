import pandas as pd
from sqlalchemy.orm import Session

from pydantic_models.statistics import RunStatisticsResponse, StepPercentiles
from pydantic_models.trajectory import TrajectoryQueryParams
from sqlalchemy_schemas.trajectory import TrajectoryRecord, filter_trajectory_query


def calculate_run_statistics(
    query_params: TrajectoryQueryParams, db_session: Session
) -> RunStatisticsResponse:
    result = filter_trajectory_query(
        query_params=query_params,
        db_session=db_session,
        columns=[
            TrajectoryRecord.success,
            TrajectoryRecord.steps,
            TrajectoryRecord.llm_calls,
            TrajectoryRecord.mean_context_words,
            TrajectoryRecord.epoch,
            TrajectoryRecord.aborted,
        ],
    ).all()
    df = pd.DataFrame(
        result,
        columns=[
            "success",
            "steps",
            "llm_calls",
            "mean_context_words",
            "epoch",
            "aborted",
        ],
    )
    db_session.close()

    if df.empty:
        raise ValueError("No trajectories available for the given query parameters.")

    steps = df["steps"]
    per_step_calls = df["llm_calls"] / steps.clip(lower=1)
    by_epoch = None
    if df["epoch"].nunique() > 1:
        by_epoch = {
            int(epoch): float(em)
            for epoch, em in df.groupby("epoch")["success"].mean().items()
        }

    return RunStatisticsResponse(
        total_trajectories=len(df),
        exact_match=float(df["success"].mean()),
        mean_steps=float(steps.mean()),
        mean_llm_calls_per_step=float(per_step_calls.mean()),
        mean_context_words=float(df["mean_context_words"].mean()),
        aborted_trajectories=int(df["aborted"].sum()),
        percentiles=StepPercentiles(
            percentile_25_steps=steps.quantile(0.25),
            percentile_50_steps=steps.median(),
            percentile_75_steps=steps.quantile(0.75),
            percentile_90_steps=steps.quantile(0.90),
        ),
        exact_match_by_epoch=by_epoch,
    )
