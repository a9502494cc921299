from typing import Optional

from pydantic import BaseModel


class StepPercentiles(BaseModel):
    percentile_25_steps: float
    percentile_50_steps: float
    percentile_75_steps: float
    percentile_90_steps: float


class RunStatisticsResponse(BaseModel):
    total_trajectories: int
    exact_match: float
    mean_steps: float
    mean_llm_calls_per_step: float
    mean_context_words: float
    aborted_trajectories: int
    percentiles: StepPercentiles
    # per-epoch EM, only when more than one epoch matches the filters
    exact_match_by_epoch: Optional[dict[int, float]] = None
