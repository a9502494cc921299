from pydantic import BaseModel, ConfigDict, Field, field_validator

DEFAULT_GLOBAL_INSTRUCTION = (
    "From the above observation and according to the hint, please extract critical "
    "informative points and summarize them into a concise paragraph. You should just "
    "output the result of summarization, without any other messages."
)


class TaskPrompt(BaseModel):
    """Fixed global instruction plus reflection-derived hint lines."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    global_instruction: str = Field(default=DEFAULT_GLOBAL_INSTRUCTION, alias="global")
    hints: tuple[str, ...] = ()

    @field_validator("hints")
    @classmethod
    def reject_duplicates(cls, hints):
        if len(set(hints)) != len(hints):
            raise ValueError("hints must be distinct")
        return hints


class ObservationCache(BaseModel):
    capacity: int = Field(default=5, ge=1)
    pending: list[str] = []
