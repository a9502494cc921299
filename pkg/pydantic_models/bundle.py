from typing import Optional

from pydantic import BaseModel, Field

from pydantic_models.retrieval import GateParams
from pydantic_models.storage import TaskPrompt
from pydantic_models.utilization import UtilizationPolicy


class PolicyBundle(BaseModel):
    """Versioned storage prompt, retrieval gate and utilization model."""

    version: int = 0
    gate: GateParams
    utilization: UtilizationPolicy = Field(default_factory=UtilizationPolicy)
    task_prompt: TaskPrompt = Field(default_factory=TaskPrompt)


class BundleManifest(BaseModel):
    version: int
    parent_version: Optional[int] = None
    stage: str = "complete"
    files: list[str] = ["gate.json", "task_prompt.json", "utilization.json"]


class EpochMetrics(BaseModel):
    epoch: int
    bundle_version: int
    trajectories: int
    mean_reward: float
    mean_steps: float
    gate_loss: Optional[float] = None
    new_hints: int = 0
    discarded: bool = False
