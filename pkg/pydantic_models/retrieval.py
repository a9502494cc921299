import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pydantic_models.arrays import NdArray, flatten_arrays, unflatten_arrays


class GateParams(BaseModel):
    """Parameters of the mixture-of-experts gate over metric functions."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    W1: NdArray
    b1: NdArray
    W2: NdArray
    b2: NdArray
    metric_names: list[str]

    @model_validator(mode="after")
    def check_shapes(self):
        hidden, joint = self.W1.shape
        if joint % 2:
            raise ValueError("W1 must act on the concatenation [h_s; h_m]")
        if self.b1.shape != (hidden,):
            raise ValueError("b1 must have the hidden width of W1")
        if self.W2.shape != (len(self.metric_names), hidden):
            raise ValueError("W2 must map the hidden layer to one logit per metric")
        if self.b2.shape != (len(self.metric_names),):
            raise ValueError("b2 must have one entry per metric")
        return self

    @property
    def dim(self) -> int:
        return self.W1.shape[1] // 2

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def flat(self) -> np.ndarray:
        return flatten_arrays(self.W1, self.b1, self.W2, self.b2)

    def with_flat(self, vector: np.ndarray) -> "GateParams":
        W1, b1, W2, b2 = unflatten_arrays(
            vector, [self.W1.shape, self.b1.shape, self.W2.shape, self.b2.shape]
        )
        return GateParams(W1=W1, b1=b1, W2=W2, b2=b2, metric_names=self.metric_names)


class PairWeighting(BaseModel):
    gamma: float = Field(gt=0.0, lt=1.0)
    t: int
    exponents: list[int] = []
    magnitudes: list[float] = []
    orientations: list[int] = []

    @property
    def weights(self) -> list[float]:
        return [o * m for o, m in zip(self.orientations, self.magnitudes)]
