from typing import Optional

from pydantic import BaseModel, Field, model_validator


class MergePrompt(BaseModel):
    observation: str
    memory_context: str
    new_memory: str


class SftRecord(BaseModel):
    trajectory_id: str
    parts: MergePrompt
    prompt: str
    target: str = Field(min_length=1)


class DpoRecord(BaseModel):
    trajectory_id: str
    parts: MergePrompt
    prompt: str
    chosen: str
    rejected: str
    beta: float = Field(default=0.1, gt=0.0)

    @model_validator(mode="after")
    def check_distinct(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected completions must differ")
        return self


class PreferenceLogprobs(BaseModel):
    """Summed sequence logprobs of one DPO record under the policy and the reference."""

    policy_chosen: Optional[float] = None
    policy_rejected: Optional[float] = None
    reference_chosen: Optional[float] = None
    reference_rejected: Optional[float] = None

    @property
    def complete(self) -> bool:
        return None not in (
            self.policy_chosen,
            self.policy_rejected,
            self.reference_chosen,
            self.reference_rejected,
        )


class TargetLogprobs(BaseModel):
    """Per-token logprobs of an SFT target under the current model."""

    token_logprobs: list[float] = []


class LossSummary(BaseModel):
    loss: float
    used: int
    skipped: int


class UtilizationPolicy(BaseModel):
    model_ref: str = "utilization-base"
    sft_dataset_path: Optional[str] = None
    dpo_dataset_path: Optional[str] = None
    beta: float = Field(default=0.1, gt=0.0)
