"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionMismatchError, SingleClassError

__all__ = [
    "as_float_vector",
    "check_instrument_values",
    "check_outcome",
    "check_same_length",
    "check_grid",
]


def as_float_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_instrument_values(values, *, min_std: float = 1e-12) -> np.ndarray:
    """Validate a genotype/instrument matrix and reject constant columns."""
    arr = check_array(values, dtype=float, ensure_2d=True, ensure_min_samples=2)
    std = arr.std(axis=0)
    bad = np.flatnonzero(std <= min_std * np.maximum(1.0, np.abs(arr).max(axis=0)))
    if bad.size:
        raise ValueError(f"instrument columns {bad.tolist()} are constant")
    return arr


def check_outcome(y, kind: str, n: int | None = None) -> np.ndarray:
    """Validate an outcome vector of ``kind`` 'continuous' or 'binary'."""
    if kind not in ("continuous", "binary"):
        raise ValueError(f"outcome kind must be 'continuous' or 'binary', got {kind!r}")
    y = as_float_vector(y, "outcome")
    if n is not None and y.shape[0] != n:
        raise DimensionMismatchError(f"outcome has {y.shape[0]} rows, expected {n}")
    if kind == "binary":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("binary outcome must contain only 0 and 1")
        if y.min() == y.max():
            raise SingleClassError("binary outcome contains a single class")
    return y


def check_same_length(*arrays, names=None) -> int:
    lengths = [np.shape(a)[0] for a in arrays]
    if len(set(lengths)) > 1:
        label = names or [f"arg{i}" for i in range(len(arrays))]
        detail = ", ".join(f"{n}={m}" for n, m in zip(label, lengths))
        raise DimensionMismatchError(f"inconsistent numbers of rows: {detail}")
    return lengths[0]


def check_grid(grid) -> np.ndarray:
    grid = as_float_vector(grid, "grid")
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    return grid
