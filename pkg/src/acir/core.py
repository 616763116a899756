"""Shared data containers, the conformal quantile convention, and evaluation metrics.

Everything here is immutable after construction and free of hidden state, so
all of it can be used from concurrent workers without coordination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EnvDataset",
    "DataSplit",
    "PredictionInterval",
    "conformal_quantile",
    "coverage_rate",
    "average_length",
    "check_unique_env_ids",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EnvDataset:
    """One environment's labeled sample.

    Parameters
    ----------
    env_id : int
        Integer label of the environment.
    features : ndarray of shape (n, p)
        Dense feature matrix, one row per observation.
    targets : ndarray of shape (n,)
        Real-valued targets aligned with the feature rows.
    """

    env_id: int
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "env_id", int(self.env_id))
        features = _readonly(np.atleast_2d(self.features))
        targets = _readonly(np.atleast_1d(self.targets))
        if features.ndim != 2:
            raise ValueError(f"features must be a matrix, got ndim={features.ndim}")
        if targets.ndim != 1:
            raise ValueError(f"targets must be a vector, got ndim={targets.ndim}")
        if features.shape[0] != targets.shape[0]:
            raise ValueError(
                f"row mismatch: {features.shape[0]} feature rows vs "
                f"{targets.shape[0]} targets"
            )
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one observation")
        if not np.isfinite(features).all() or not np.isfinite(targets).all():
            raise ValueError("features and targets must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


def check_unique_env_ids(envs: list[EnvDataset] | tuple[EnvDataset, ...]) -> None:
    """Raise if the collection reuses an environment id (or is empty)."""
    if len(envs) == 0:
        raise ValueError("need at least one environment")
    ids = [env.env_id for env in envs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate environment ids in {ids}")


@dataclass(frozen=True)
class DataSplit:
    """Disjoint train/calibration partition of one environment's data."""

    train: EnvDataset
    calibration: EnvDataset

    def __post_init__(self) -> None:
        if self.train.env_id != self.calibration.env_id:
            raise ValueError(
                f"split parts disagree on env_id: "
                f"{self.train.env_id} vs {self.calibration.env_id}"
            )


@dataclass(frozen=True)
class PredictionInterval:
    """Symmetric prediction interval [center - half_width, center + half_width]."""

    center: float
    half_width: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", float(self.center))
        object.__setattr__(self, "half_width", float(self.half_width))
        if math.isnan(self.center) or not math.isfinite(self.center):
            raise ValueError(f"center must be finite, got {self.center}")
        if math.isnan(self.half_width) or self.half_width < 0:
            raise ValueError(f"half_width must be >= 0, got {self.half_width}")

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """Finite-sample conformal quantile of a vector of conformity scores.

    Returns the k-th smallest score with k = ceil((1 - alpha) * (n + 1)),
    or +inf when k exceeds n (the calibration set is too small for the
    requested miscoverage level; an infinite interval keeps validity).

    Parameters
    ----------
    scores : array-like of shape (n,)
        Finite, nonnegative conformity scores. Need not be sorted.
    alpha : float
        Miscoverage rate in (0, 1).
    """
    scores = np.asarray(scores, dtype=float).ravel()
    n = scores.size
    if n == 0:
        raise ValueError("scores must be nonempty")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if scores.min() < 0:
        raise ValueError("scores must be nonnegative")
    k = math.ceil((1.0 - alpha) * (n + 1))
    if k > n:
        return math.inf
    return float(np.sort(scores)[k - 1])


def coverage_rate(intervals: list[PredictionInterval], truths: np.ndarray) -> float:
    """Fraction of truths falling inside their interval (bounds inclusive)."""
    truths = np.asarray(truths, dtype=float).ravel()
    if len(intervals) != truths.size:
        raise ValueError(
            f"length mismatch: {len(intervals)} intervals vs {truths.size} truths"
        )
    if truths.size == 0:
        raise ValueError("need at least one interval")
    hits = sum(iv.contains(y) for iv, y in zip(intervals, truths))
    return hits / truths.size


def average_length(intervals: list[PredictionInterval]) -> float:
    """Mean interval half-width; +inf as soon as any half-width is infinite."""
    if len(intervals) == 0:
        raise ValueError("need at least one interval")
    return float(np.mean([iv.half_width for iv in intervals]))
