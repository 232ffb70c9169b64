# funcount/arrays.py
#
# numpy-backed field types for the pydantic models. Values are copied on
# validation, made read-only, and dumped to nested lists for JSON.

from typing import Annotated

import numpy as np
from pydantic import BeforeValidator, PlainSerializer


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _as_float_array(values) -> np.ndarray:
    return _frozen(values, np.float64)


def _as_int_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size and not np.all(np.isfinite(arr.astype(np.float64))):
        raise ValueError("integer array contains missing or non-finite entries")
    if arr.size and np.any(np.asarray(arr, dtype=np.float64) != np.round(np.asarray(arr, dtype=np.float64))):
        raise ValueError("integer array contains non-integer entries")
    return _frozen(arr, np.int64)


def _as_bool_array(values) -> np.ndarray:
    return _frozen(values, bool)


def _to_list(arr: np.ndarray) -> list:
    return np.asarray(arr).tolist()


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float_array),
    PlainSerializer(_to_list, return_type=list),
]

IntArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_int_array),
    PlainSerializer(_to_list, return_type=list),
]

BoolArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_bool_array),
    PlainSerializer(_to_list, return_type=list),
]
