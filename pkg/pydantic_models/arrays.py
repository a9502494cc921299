from typing import Annotated

import numpy as np
from pydantic import BeforeValidator, PlainSerializer, WithJsonSchema


def _to_float_array(value) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(array)):
        raise ValueError("array contains non-finite entries")
    return array


# numpy array on the python side, nested lists on the JSON side.
# Models using it need ConfigDict(arbitrary_types_allowed=True).
NdArray = Annotated[
    np.ndarray,
    BeforeValidator(_to_float_array),
    PlainSerializer(lambda array: array.tolist(), return_type=list),
    WithJsonSchema({"type": "array", "items": {}}),
]


def flatten_arrays(*arrays: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ravel(array) for array in arrays])


def unflatten_arrays(vector: np.ndarray, shapes: list[tuple]) -> list[np.ndarray]:
    parts, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        block = np.asarray(vector[offset : offset + size], dtype=float)
        parts.append(block.reshape(shape))
        offset += size
    if offset != len(vector):
        raise ValueError(f"expected {offset} parameters, got {len(vector)}")
    return parts
