from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator


class MemoryUnit(BaseModel):
    id: int = Field(ge=0)
    text: str
    source: str
    step: int = Field(ge=0)
    embedding: list[float]
    emotion: Optional[list[float]] = None
    importance_feat: Optional[list[float]] = None
    kind: Literal["observation", "thought"] = "observation"
    fallback: bool = False

    @model_validator(mode="after")
    def check_emotion_length(self):
        if self.emotion is not None and len(self.emotion) != 8:
            raise ValueError("emotion vector must have length 8")
        return self


class MemoryStore(BaseModel):
    dim: int = Field(default=768, ge=1)
    units: list[MemoryUnit] = []

    @model_validator(mode="after")
    def check_units(self):
        for previous, unit in zip([None] + self.units, self.units):
            if len(unit.embedding) != self.dim:
                raise ValueError(
                    f"unit {unit.id} embedding has length {len(unit.embedding)}"
                )
            if previous is not None and unit.id <= previous.id:
                raise ValueError("unit ids must be strictly increasing")
        return self

    def __len__(self) -> int:
        return len(self.units)

    @property
    def next_id(self) -> int:
        return self.units[-1].id + 1 if self.units else 0

    def get(self, unit_id: int) -> MemoryUnit:
        # ids are increasing, so position lookup is a binary search
        lo, hi = 0, len(self.units)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.units[mid].id < unit_id:
                lo = mid + 1
            else:
                hi = mid
        if lo == len(self.units) or self.units[lo].id != unit_id:
            raise KeyError(unit_id)
        return self.units[lo]

    def prefix(self, size: int) -> list[MemoryUnit]:
        return self.units[:size]

    def embedding_matrix(self, units: Optional[list[MemoryUnit]] = None) -> np.ndarray:
        units = self.units if units is None else units
        if not units:
            return np.zeros((0, self.dim))
        return np.array([unit.embedding for unit in units], dtype=float)


class AggregationTrace(BaseModel):
    contexts: list[str] = [""]
    merged_ids: list[int] = []
    word_deltas: list[int] = []
    gains: list[float] = []
    stop_draws: list[int] = []
    stop_step: int = 0


class RankedEntry(BaseModel):
    id: int
    score: float


class RankedMemories(BaseModel):
    entries: list[RankedEntry] = []
    query_step: int = 0

    @property
    def ids(self) -> list[int]:
        return [entry.id for entry in self.entries]

    def top(self, k: int) -> "RankedMemories":
        return RankedMemories(entries=self.entries[:k], query_step=self.query_step)


class StepRecord(BaseModel):
    step: int = Field(ge=1)
    state_text: str
    store_size: int = Field(ge=0)
    ranked_ids: list[int] = []
    context: str = ""
    thought: str = ""
    action: str = ""
    word_deltas: list[int] = []
    aggregation: Optional[AggregationTrace] = None
    llm_calls: int = 0
    context_words: int = 0

    @model_validator(mode="after")
    def check_ranked_ids(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise ValueError("ranked_ids must be distinct")
        return self


class Trajectory(BaseModel):
    id: str
    question: str
    gold_answer: str = ""
    steps: list[StepRecord] = []
    reward: float = Field(default=0.0, ge=0.0, le=1.0)
    success: bool = False
    memories: MemoryStore = Field(default_factory=MemoryStore)
    bundle_version: int = 0
    epoch: int = 0
    memory_policy: str = "cycle"
    aborted: bool = False

    @model_validator(mode="after")
    def check_step_snapshots(self):
        for record in self.steps:
            visible = {unit.id for unit in self.memories.prefix(record.store_size)}
            missing = [uid for uid in record.ranked_ids if uid not in visible]
            if missing:
                raise ValueError(
                    f"step {record.step} ranks ids {missing} outside its store snapshot"
                )
        return self


class Recall(BaseModel):
    """What a memory policy hands the agent for one step."""

    context: str
    ranked: RankedMemories = Field(default_factory=RankedMemories)
    aggregation: Optional[AggregationTrace] = None
    store_size: int = 0
    llm_calls: int = 0
