from typing import Literal

from pydantic import BaseModel, Field


class QaTask(BaseModel):
    question: str
    answer: str
    max_steps: int = Field(default=5, ge=1)


class EnvAction(BaseModel):
    kind: Literal["search", "finish", "invalid"]
    argument: str

    def render(self) -> str:
        if self.kind == "search":
            return f"Search[{self.argument}]"
        if self.kind == "finish":
            return f"Finish[{self.argument}]"
        return self.argument


class CorpusDocument(BaseModel):
    title: str
    text: str


class StepOutcome(BaseModel):
    observation: str
    reward: float
    done: bool
