"""Segmentation and case-level evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .types import CompsegError, ShapeMismatch


class EmptyInput(CompsegError):
    pass


class MissingClass(CompsegError):
    pass


ABSENT_CONVENTIONS = ("one", "zero", "skip")


@dataclass
class SegScores:
    per_class_f1: np.ndarray
    macro_f1: float
    confusion: np.ndarray  # rows: ground truth, columns: prediction


def confusion_matrix(pred, gt, k: int) -> np.ndarray:
    """``k x k`` pixel counts; ground-truth values outside ``0..k-1`` are ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = (gt >= 0) & (gt < k)
    p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError("predictions must lie in 0..k-1")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def scores_from_confusion(conf: np.ndarray, absent: str = "one") -> SegScores:
    conf = np.asarray(conf)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(0) - tp
    fn = conf.sum(1) - tp
    denom = 2 * tp + fp + fn
    if absent not in ABSENT_CONVENTIONS:
        raise ValueError(f"absent must be one of {ABSENT_CONVENTIONS}")
    fill = {"one": 1.0, "zero": 0.0, "skip": np.nan}[absent]
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), fill)
    macro = float(np.nanmean(f1)) if not np.all(np.isnan(f1)) else float("nan")
    return SegScores(f1, macro, conf)


def f1_per_class(pred, gt, k: int, absent: str = "one") -> SegScores:
    """Per-class F1 of a predicted label map against ground truth.

    Ground-truth sentinel pixels (any value ``>= k``) are excluded. A class
    present in neither map scores ``absent``: 1.0 by default, 0.0 with
    ``"zero"``, or NaN (left out of the macro mean) with ``"skip"``.
    """
    return scores_from_confusion(confusion_matrix(pred, gt, k), absent)


def case_averaged_f1(per_case_scores: Sequence[SegScores]) -> np.ndarray:
    if not per_case_scores:
        raise EmptyInput("need at least one case")
    return np.nanmean(np.stack([s.per_class_f1 for s in per_case_scores]), axis=0)


@dataclass
class CasePrediction:
    case_id: str
    predicted_class: int | None
    class_pixel_shares: np.ndarray
    no_tumor_pixels: bool = False
    tie: bool = False


def case_prediction(seg_maps: Iterable, tumor_classes: Sequence[int], k: int,
                    case_id: str = "") -> CasePrediction:
    """Case label from the dominant tumour class over all slides of a case.

    Pixels with values ``>= k`` (unevaluated) are ignored. Ties go to the
    lowest tumour class index and are flagged; a case without any tumour
    pixels gets ``predicted_class=None`` and ``no_tumor_pixels=True``.
    """
    counts = np.zeros(k, dtype=np.int64)
    n_maps = 0
    for m in seg_maps:
        m = np.asarray(m)
        counts += np.bincount(m[(m >= 0) & (m < k)].ravel(), minlength=k)[:k]
        n_maps += 1
    if n_maps == 0:
        raise EmptyInput("need at least one slide")
    return prediction_from_counts(counts, tumor_classes, case_id)


def prediction_from_counts(counts, tumor_classes: Sequence[int], case_id: str = "") -> CasePrediction:
    counts = np.asarray(counts)
    total = counts.sum()
    shares = counts / total if total else np.zeros(len(counts))
    tumor = sorted(tumor_classes)
    tumor_counts = counts[tumor]
    if tumor_counts.max() == 0:
        return CasePrediction(case_id, None, shares, no_tumor_pixels=True)
    best = tumor_counts.max()
    winners = [c for c, n in zip(tumor, tumor_counts) if n == best]
    return CasePrediction(case_id, winners[0], shares, tie=len(winners) > 1)


def complementary_area_share(seg_map, diagnosis: int, complement_class: int, k: int | None = None) -> float:
    """Fraction of evaluated pixels predicted as ``complement_class``.

    When ``k`` is given, pixels with values ``>= k`` count as unevaluated and
    leave the denominator.
    """
    if diagnosis == complement_class:
        raise ValueError("complement class must differ from the diagnosis")
    m = np.asarray(seg_map)
    if k is not None:
        m = m[(m >= 0) & (m < k)]
    if m.size == 0:
        return 0.0
    return float(np.count_nonzero(m == complement_class) / m.size)


def balanced_accuracy(preds, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``.

    Raises :class:`MissingClass` when ``labels`` holds a single class, since one
    recall alone is not a balanced accuracy for a binary task.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeMismatch("preds and labels must have equal length")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise MissingClass(f"labels contain only {classes.tolist()}")
    recalls = [np.mean(preds[labels == c] == c) for c in classes]
    return float(np.mean(recalls))


@dataclass
class BootstrapResult:
    low: float
    high: float
    estimate: float
    n_resamples: int
    rejected: int
    samples: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.low, self.high))


def bootstrap_ci(preds, labels, metric: Callable = balanced_accuracy, n_resamples: int = 1000,
                 confidence: float = 0.95, seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap interval of ``metric`` over case-level resamples.

    Resamples on which ``metric`` raises a package error (for example a draw
    containing only one class) are redrawn until ``n_resamples`` valid values
    exist or ``20 * n_resamples`` draws were spent; the number of rejected
    draws is reported.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise EmptyInput("no cases")
    rng = np.random.default_rng(seed)
    values = []
    rejected = 0
    draws = 0
    while len(values) < n_resamples and draws < 20 * n_resamples:
        idx = rng.integers(0, n, size=n)
        draws += 1
        try:
            values.append(metric(preds[idx], labels[idx]))
        except CompsegError:
            rejected += 1
    if not values:
        raise EmptyInput("every bootstrap resample was degenerate")
    values = np.asarray(values, dtype=np.float64)
    tail = (1 - confidence) / 2 * 100
    low, high = np.percentile(values, [tail, 100 - tail])
    try:
        estimate = metric(preds, labels)
    except CompsegError:
        estimate = float("nan")
    return BootstrapResult(float(low), float(high), estimate, len(values), rejected, values)
