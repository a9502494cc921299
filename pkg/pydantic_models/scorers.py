from pydantic import BaseModel, field_validator, model_validator


class EmotionSample(BaseModel):
    sentence: str
    label: list[int]

    @field_validator("label")
    @classmethod
    def check_label(cls, label):
        if len(label) != 8 or any(v not in (0, 1) for v in label):
            raise ValueError("label must be an 8-dim 0/1 vector")
        if not 1 <= sum(label) <= 3:
            raise ValueError("label must name between one and three emotions")
        return label


class ImportanceTriple(BaseModel):
    query: str
    positive: str
    negative: str
    chain_id: int
    positive_rank: int
    negative_rank: int

    @model_validator(mode="after")
    def check_order(self):
        if self.positive_rank <= self.negative_rank:
            raise ValueError("positive must come later in the enrichment chain")
        return self


class ImportanceChain(BaseModel):
    chain_id: int
    query: str
    sentences: list[str]


class ScorerEvaluationRow(BaseModel):
    method: str
    ndcg_at_5: float
    mse: float
    ifr: float
