"""Shared domain types and transition-matrix algebra.

Label arrays are plain integer numpy arrays. The value ``k`` (the class count)
is reserved as the "unannotated" sentinel, see :func:`unannotated`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-9


class CompsegError(Exception):
    """Base class for all errors raised by this package."""


class NonZeroDiagonal(CompsegError):
    def __init__(self, index: int, value: float):
        super().__init__(f"diagonal entry q[{index}][{index}] = {value} must be 0")
        self.index = index
        self.value = value


class RowNotStochastic(CompsegError):
    def __init__(self, row: int, total: float):
        super().__init__(f"row {row} sums to {total}, expected 1")
        self.row = row
        self.total = total


class NegativeEntry(CompsegError):
    def __init__(self, row: int, col: int, value: float):
        super().__init__(f"entry q[{row}][{col}] = {value} outside [0, 1]")
        self.row = row
        self.col = col
        self.value = value


class DimensionMismatch(CompsegError):
    pass


class ShapeMismatch(CompsegError):
    pass


class AllZeroCounts(CompsegError):
    pass


def unannotated(k: int) -> int:
    """Sentinel label for pixels without annotation in a ``k``-class problem."""
    return k


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic ``k x k`` matrix with ``q[i, j] = P(compl = j | true = i)``.

    Build instances through :meth:`from_rows` (or :func:`transition_matrix_new`),
    which validates the input and renormalises every row exactly.
    """

    k: int
    q: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.q.setflags(write=False)

    @classmethod
    def from_rows(cls, rows) -> "TransitionMatrix":
        q = np.array(rows, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DimensionMismatch(f"transition matrix must be square, got shape {q.shape}")
        k = q.shape[0]
        if k < 2:
            raise DimensionMismatch("transition matrix needs k >= 2")
        for i in range(k):
            if q[i, i] != 0.0:
                raise NonZeroDiagonal(i, float(q[i, i]))
        bad = np.argwhere(~((q >= 0.0) & (q <= 1.0)))
        if len(bad):
            i, j = (int(v) for v in bad[0])
            raise NegativeEntry(i, j, float(q[i, j]))
        sums = q.sum(axis=1)
        for i, s in enumerate(sums):
            if abs(s - 1.0) > ROW_SUM_TOL:
                raise RowNotStochastic(i, float(s))
        q = q / sums[:, None]
        return cls(k=k, q=q)

    @property
    def sentinel(self) -> int:
        return unannotated(self.k)

    def rows(self) -> list[list[float]]:
        return self.q.tolist()

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "q": self.rows()})

    def __eq__(self, other):
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.q, other.q)

    def __hash__(self):
        return hash((self.k, self.q.tobytes()))


def transition_matrix_new(rows) -> TransitionMatrix:
    return TransitionMatrix.from_rows(rows)


PRESETS: dict[str, list[list[float]]] = {
    "mnist-q1": [[0, 0.7, 0.3], [0.3, 0, 0.7], [0.7, 0.3, 0]],
    "mnist-q2": [[0, 1.0, 0], [1.0, 0, 0], [0.5, 0.5, 0]],
    "liver": [[0, 0.998, 0.002], [0.980, 0, 0.020], [0.430, 0.570, 0]],
}


def preset(name: str) -> TransitionMatrix:
    try:
        return TransitionMatrix.from_rows(PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown transition matrix preset {name!r}; "
                       f"choose from {sorted(PRESETS)}") from None


def load_transition_matrix(source: str | Path | dict) -> TransitionMatrix:
    """Load a transition matrix from a preset name, a JSON file or a parsed dict.

    The JSON form is ``{"k": 3, "q": [[...], [...], [...]]}`` with rows in order.
    """
    if isinstance(source, dict):
        data = source
    elif isinstance(source, str) and source in PRESETS:
        return preset(source)
    else:
        data = json.loads(Path(source).read_text())
    q = TransitionMatrix.from_rows(data["q"])
    if "k" in data and int(data["k"]) != q.k:
        raise DimensionMismatch(f"declared k={data['k']} but q is {q.k}x{q.k}")
    return q


def apply_transposed(q: TransitionMatrix, y_hat) -> np.ndarray:
    """Map class probabilities ``y_hat`` (last axis of length k) through ``Q^T``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape[-1] != q.k:
        raise DimensionMismatch(f"expected last axis of length {q.k}, got {y_hat.shape[-1]}")
    return y_hat @ q.q


def estimate_other_row(class_patch_counts: Sequence[float], own_class: int | None = None) -> np.ndarray:
    """Estimate the Q row of a class whose complementary labels cannot be derived analytically.

    ``class_patch_counts[j]`` counts patches that carry complementary label ``j``
    (the own class skipped). The counts are normalised and a zero is inserted at
    ``own_class``, which defaults to the last position.

    >>> estimate_other_row([43, 57]).round(3).tolist()
    [0.43, 0.57, 0.0]
    """
    counts = np.asarray(class_patch_counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 1:
        raise DimensionMismatch("counts must be a non-empty vector")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise AllZeroCounts("at least one count must be positive")
    k = len(counts) + 1
    own = k - 1 if own_class is None else own_class % k
    return np.insert(counts / total, own, 0.0)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    gamma: float = 2.0
    class_weights: tuple[float, ...] | None = None
    use_focal: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")


@dataclass
class SlidePrediction:
    slide_id: str
    class_counts: np.ndarray


@dataclass
class Case:
    """Patches/slides of one patient sharing a single diagnosis."""

    case_id: str
    diagnosis: int
    slides: list[SlidePrediction]

    def __post_init__(self):
        if not self.slides:
            raise ValueError(f"case {self.case_id} has no slides")


def check_patch_batch(data: np.ndarray) -> np.ndarray:
    """Validate an ``N x P x P x C`` patch array with intensities in [0, 1]."""
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[1] != data.shape[2] or min(data.shape) < 1:
        raise ShapeMismatch(f"expected N x P x P x C, got {data.shape}")
    if data.min() < 0 or data.max() > 1:
        raise ValueError("patch intensities must lie in [0, 1]")
    return data


def check_label_mask(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"label masks must be integer arrays, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() > unannotated(k)):
        raise ValueError(f"labels must lie in 0..{k - 1} or be the sentinel {k}")
    return labels


def check_softmax_map(probs, atol: float = 1e-6) -> np.ndarray:
    probs = np.asarray(probs)
    if probs.min() < 0 or not np.allclose(probs.sum(-1), 1.0, atol=atol, rtol=0):
        raise ValueError("softmax map must be non-negative with per-pixel sums of 1")
    return probs
