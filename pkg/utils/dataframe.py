from typing import Optional

import numpy as np
import pandas as pd

from pydantic_models.memory import Trajectory

SUMMARY_COLUMNS = [
    "trajectory_id",
    "question",
    "gold_answer",
    "final_action",
    "reward",
    "success",
    "steps",
    "llm_calls",
    "mean_context_words",
    "bundle_version",
    "epoch",
    "memory_policy",
    "aborted",
]


def trajectory_summary(trajectory: Trajectory) -> dict:
    steps = trajectory.steps
    return {
        "trajectory_id": trajectory.id,
        "question": trajectory.question,
        "gold_answer": trajectory.gold_answer,
        "final_action": steps[-1].action if steps else "",
        "reward": trajectory.reward,
        "success": trajectory.success,
        "steps": len(steps),
        "llm_calls": sum(record.llm_calls for record in steps),
        "mean_context_words": (
            float(np.mean([record.context_words for record in steps])) if steps else 0.0
        ),
        "bundle_version": trajectory.bundle_version,
        "epoch": trajectory.epoch,
        "memory_policy": trajectory.memory_policy,
        "aborted": trajectory.aborted,
    }


def trajectories_to_dataframe(trajectories: list[Trajectory]) -> pd.DataFrame:
    return pd.DataFrame(
        [trajectory_summary(t) for t in trajectories], columns=SUMMARY_COLUMNS
    )


def summarize(
    summaries: pd.DataFrame, timings: Optional[pd.DataFrame] = None
) -> pd.DataFrame:
    """EM, mean reasoning steps and per-step costs, grouped by policy and epoch.

    Step-time columns are filled only when a timings frame (trajectory_id, step,
    seconds) is given.
    """
    if summaries.empty:
        raise ValueError("No trajectories to summarize.")
    df = summaries.copy()
    df["llm_calls_per_step"] = df["llm_calls"] / df["steps"].clip(lower=1)
    report = (
        df.groupby(["memory_policy", "epoch"], sort=True)
        .agg(
            trajectories=("trajectory_id", "count"),
            exact_match=("success", "mean"),
            mean_reward=("reward", "mean"),
            mean_steps=("steps", "mean"),
            mean_llm_calls_per_step=("llm_calls_per_step", "mean"),
            mean_context_words=("mean_context_words", "mean"),
            aborted=("aborted", "sum"),
        )
        .reset_index()
    )
    report["exact_match"] = report["exact_match"].astype(float)
    if timings is None or timings.empty:
        for column in ["step_seconds_mean", "step_seconds_p50", "step_seconds_p90"]:
            report[column] = np.nan
        return report
    joined = timings.merge(
        df[["trajectory_id", "memory_policy", "epoch"]], on="trajectory_id", how="inner"
    )
    step_times = (
        joined.groupby(["memory_policy", "epoch"])["seconds"]
        .agg(
            step_seconds_mean="mean",
            step_seconds_p50=lambda s: s.quantile(0.5),
            step_seconds_p90=lambda s: s.quantile(0.9),
        )
        .reset_index()
    )
    return report.merge(step_times, on=["memory_policy", "epoch"], how="left")

