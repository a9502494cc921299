import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from pydantic_models.arrays import NdArray, flatten_arrays, unflatten_arrays

EMOTIONS = [
    "joy",
    "acceptance",
    "fear",
    "surprise",
    "sadness",
    "disgust",
    "anger",
    "anticipation",
]


class MetricVector(BaseModel):
    names: list[str]
    values: list[float]

    @model_validator(mode="after")
    def check_shape(self):
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")
        if not all(np.isfinite(self.values)):
            raise ValueError("metric values must be finite")
        return self


class EmotionScorer(BaseModel):
    """h_e(x) = W2e . tanh(W1e . x + b1e) + b2e, always 8 outputs."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    W1e: NdArray
    b1e: NdArray
    W2e: NdArray
    b2e: NdArray

    @model_validator(mode="after")
    def check_shapes(self):
        hidden, _ = self.W1e.shape
        if self.b1e.shape != (hidden,) or self.W2e.shape != (len(EMOTIONS), hidden):
            raise ValueError("emotion scorer layer shapes are inconsistent")
        if self.b2e.shape != (len(EMOTIONS),):
            raise ValueError("emotion scorer must emit 8 values")
        return self

    @property
    def dim(self) -> int:
        return self.W1e.shape[1]

    def flat(self) -> np.ndarray:
        return flatten_arrays(self.W1e, self.b1e, self.W2e, self.b2e)

    def with_flat(self, vector: np.ndarray) -> "EmotionScorer":
        W1e, b1e, W2e, b2e = unflatten_arrays(
            vector, [self.W1e.shape, self.b1e.shape, self.W2e.shape, self.b2e.shape]
        )
        return EmotionScorer(W1e=W1e, b1e=b1e, W2e=W2e, b2e=b2e)

    def emotions(self, embeddings: np.ndarray) -> np.ndarray:
        """Rows of `embeddings` (or a single vector) to emotion vectors."""
        hidden = np.tanh(np.einsum("...d,hd->...h", embeddings, self.W1e) + self.b1e)
        return np.einsum("...h,eh->...e", hidden, self.W2e) + self.b2e


class ImportanceScorer(BaseModel):
    """Two distinct linear maps: query side (W1p, b1p) and memory side (W2p, b2p)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    W1p: NdArray
    b1p: NdArray
    W2p: NdArray
    b2p: NdArray

    @model_validator(mode="after")
    def check_shapes(self):
        if self.W1p.shape != self.W2p.shape:
            raise ValueError("query and memory projections must share a shape")
        projection = self.W1p.shape[0]
        if self.b1p.shape != (projection,) or self.b2p.shape != (projection,):
            raise ValueError("importance scorer bias shapes are inconsistent")
        return self

    @property
    def dim(self) -> int:
        return self.W1p.shape[1]

    def flat(self) -> np.ndarray:
        return flatten_arrays(self.W1p, self.b1p, self.W2p, self.b2p)

    def with_flat(self, vector: np.ndarray) -> "ImportanceScorer":
        W1p, b1p, W2p, b2p = unflatten_arrays(
            vector, [self.W1p.shape, self.b1p.shape, self.W2p.shape, self.b2p.shape]
        )
        return ImportanceScorer(W1p=W1p, b1p=b1p, W2p=W2p, b2p=b2p)

    def query_features(self, embeddings: np.ndarray) -> np.ndarray:
        return np.einsum("...d,pd->...p", embeddings, self.W1p) + self.b1p

    def memory_features(self, embeddings: np.ndarray) -> np.ndarray:
        return np.einsum("...d,pd->...p", embeddings, self.W2p) + self.b2p
