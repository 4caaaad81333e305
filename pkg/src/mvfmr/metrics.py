"""Curve-recovery and prediction metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import DimensionMismatchError, MissingBandsError, SingleClassError
from .validation import as_float_vector, check_grid

__all__ = ["CurveComparison", "ise", "pointwise_coverage", "auc", "mse"]


@dataclass(frozen=True)
class CurveComparison:
    """An estimated curve, the truth and optional pointwise bands on one grid."""

    grid: np.ndarray
    estimate: np.ndarray
    truth: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        grid = check_grid(self.grid)
        arrays = {"estimate": self.estimate, "truth": self.truth}
        if (self.lower is None) != (self.upper is None):
            raise MissingBandsError("lower and upper bands must be given together")
        if self.lower is not None:
            arrays.update(lower=self.lower, upper=self.upper)
        for name, value in arrays.items():
            arr = np.asarray(value, dtype=float).ravel()
            if arr.shape != grid.shape:
                raise DimensionMismatchError(
                    f"{name} has {arr.size} points but the grid has {grid.size}"
                )
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "grid", grid)

    @property
    def has_bands(self) -> bool:
        return self.lower is not None


def ise(cmp: CurveComparison, normalize: bool = True) -> float:
    """Integrated squared error by the trapezoidal rule.

    Divided by the domain length ``grid[-1] - grid[0]`` unless ``normalize``
    is false.
    """
    sq = (cmp.estimate - cmp.truth) ** 2
    value = float(np.trapezoid(sq, cmp.grid))
    if normalize:
        value /= float(cmp.grid[-1] - cmp.grid[0])
    return value


def pointwise_coverage(cmps: Sequence[CurveComparison]) -> np.ndarray:
    """Fraction of comparisons whose band contains the truth, per grid point."""
    cmps = list(cmps)
    if not cmps:
        raise ValueError("need at least one curve comparison")
    grid = cmps[0].grid
    hits = np.zeros(grid.size)
    for c in cmps:
        if not c.has_bands:
            raise MissingBandsError("every comparison needs lower and upper bands")
        if c.grid.shape != grid.shape or not np.array_equal(c.grid, grid):
            raise DimensionMismatchError("all comparisons must share one grid")
        hits += (c.lower <= c.truth) & (c.truth <= c.upper)
    return hits / len(cmps)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2)."""
    scores = as_float_vector(scores, "scores")
    labels = as_float_vector(labels, "labels")
    if scores.shape != labels.shape:
        raise DimensionMismatchError("scores and labels must have equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks handle ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mse(predicted, observed) -> float:
    predicted = as_float_vector(predicted, "predicted")
    observed = as_float_vector(observed, "observed")
    if predicted.shape != observed.shape:
        raise DimensionMismatchError("predicted and observed must have equal length")
    return float(np.mean((predicted - observed) ** 2))
