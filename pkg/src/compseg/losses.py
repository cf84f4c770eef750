"""Masked cross-entropy, complementary and focal complementary losses.

All losses take a channels-last probability map ``y_hat`` of shape
``(..., k)`` and integer label arrays of shape ``(...)`` where the value ``k``
marks pixels without a label. Every loss is a mean over the pixels that carry a
label, so a batch with no labelled pixels yields ``0`` with ``pixel_count == 0``.

The ``*_logit_grad`` functions give the closed-form gradient of each loss with
respect to the pre-softmax logits. They do not go through autograd and are
what the finite-difference checks compare against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .types import LossConfig, ShapeMismatch, TransitionMatrix, unannotated

PROB_FLOOR = 1e-12


@dataclass
class LossValue:
    value: torch.Tensor
    pixel_count: int

    def __float__(self):
        return float(self.value)


def _as_probs(y_hat) -> torch.Tensor:
    t = torch.as_tensor(y_hat)
    return t if t.is_floating_point() else t.double()


def _as_labels(labels, shape, k: int) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels).long()
    if tuple(labels.shape) != tuple(shape):
        raise ShapeMismatch(f"labels {tuple(labels.shape)} do not match probabilities {tuple(shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() > unannotated(k)):
        raise ValueError(f"labels must lie in 0..{k}")
    return labels


def _q_tensor(q: TransitionMatrix, like: torch.Tensor, k: int) -> torch.Tensor:
    if q.k != k:
        raise ShapeMismatch(f"transition matrix has k={q.k} but probabilities have k={k}")
    return torch.tensor(q.q, dtype=like.dtype)


def default_class_weights(label_masks, k: int) -> np.ndarray:
    """Inverse pixel frequency over annotated pixels, rescaled to mean 1.

    Classes that never occur get the largest observed weight.
    """
    counts = np.zeros(k, dtype=np.float64)
    for m in label_masks:
        m = np.asarray(m)
        counts += np.bincount(m[m < k].ravel(), minlength=k)[:k]
    if counts.sum() == 0:
        return np.ones(k)
    inv = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
    inv[counts == 0] = inv.max()
    return inv / inv.mean()


def masked_weighted_ce(y_hat, y, class_weights=None) -> LossValue:
    """Class-weighted cross-entropy averaged over annotated pixels."""
    p = _as_probs(y_hat)
    k = p.shape[-1]
    labels = _as_labels(y, p.shape[:-1], k)
    mask = labels < k
    n = int(mask.sum())
    if n == 0:
        return LossValue(p.sum() * 0.0, 0)
    picked = p[mask].gather(-1, labels[mask][:, None])[:, 0]
    nll = -torch.log(picked.clamp_min(PROB_FLOOR))
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=p.dtype)
        if w.shape != (k,):
            raise ShapeMismatch(f"class_weights must have length {k}")
        nll = nll * w[labels[mask]]
    return LossValue(nll.sum() / n, n)


def _inner_prob(p: torch.Tensor, y_bar, q: TransitionMatrix):
    """(Q^T y_hat)_j at each labelled pixel, plus the mask and labels used."""
    k = p.shape[-1]
    qt = _q_tensor(q, p, k)
    labels = _as_labels(y_bar, p.shape[:-1], k)
    mask = labels < k
    j = labels[mask]
    # (Q^T p)_j = sum_i p_i Q[i, j]
    s = (p[mask] * qt[:, j].T).sum(-1)
    return s, mask, j


def complementary_loss(y_hat, y_bar, q: TransitionMatrix) -> LossValue:
    """Mean of ``-log (Q^T y_hat)_j`` over pixels with complementary label ``j``."""
    return focal_complementary_loss(y_hat, y_bar, q, gamma=0.0)


def focal_complementary_loss(y_hat, y_bar, q: TransitionMatrix, gamma: float) -> LossValue:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = _as_probs(y_hat)
    s, mask, _ = _inner_prob(p, y_bar, q)
    n = int(mask.sum())
    if n == 0:
        return LossValue(p.sum() * 0.0, 0)
    s = s.clamp(PROB_FLOOR, 1.0)
    term = -torch.log(s)
    if gamma != 0:
        term = (1.0 - s) ** gamma * term
    return LossValue(term.sum() / n, n)


@dataclass
class CombinedLoss:
    total: LossValue
    supervised: LossValue
    complementary: LossValue


def combined_loss(y_hat, y, y_bar, q: TransitionMatrix, cfg: LossConfig) -> CombinedLoss:
    """Supervised term plus ``alpha`` times the (focal) complementary term.

    Each part is averaged over its own labelled pixels.
    """
    sup = masked_weighted_ce(y_hat, y, cfg.class_weights)
    if cfg.alpha == 0:
        comp = LossValue(sup.value * 0.0, 0)
    elif cfg.use_focal:
        comp = focal_complementary_loss(y_hat, y_bar, q, cfg.gamma)
    else:
        comp = complementary_loss(y_hat, y_bar, q)
    total = sup.value + cfg.alpha * comp.value if cfg.alpha else sup.value
    return CombinedLoss(LossValue(total, sup.pixel_count + comp.pixel_count), sup, comp)


# closed-form gradients w.r.t. logits ------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def masked_weighted_ce_logit_grad(logits, y, class_weights=None) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[-1]
    y = np.asarray(y)
    p = _softmax(z)
    mask = y < k
    grad = np.zeros_like(z)
    n = mask.sum()
    if n == 0:
        return grad
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    onehot = np.eye(k)[y[mask]]
    grad[mask] = w[y[mask]][:, None] * (p[mask] - onehot) / n
    return grad


def focal_complementary_logit_grad(logits, y_bar, q: TransitionMatrix, gamma: float) -> np.ndarray:
    """Gradient of :func:`focal_complementary_loss` (``gamma = 0`` gives the plain loss).

    With ``s = sum_i p_i Q[i, j]`` the softmax Jacobian gives
    ``ds/dz_m = p_m (Q[m, j] - s)``, so only ``dL/ds`` depends on the variant.
    """
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[-1]
    y_bar = np.asarray(y_bar)
    p = _softmax(z)
    mask = y_bar < k
    grad = np.zeros_like(z)
    n = mask.sum()
    if n == 0:
        return grad
    j = y_bar[mask]
    qcol = q.q[:, j].T
    pm = p[mask]
    s = (pm * qcol).sum(-1)
    live = s > PROB_FLOOR  # clamped pixels have zero gradient
    s_safe = np.where(live, s, 1.0)
    dl_ds = -1.0 / s_safe
    if gamma != 0:
        one_minus = np.clip(1.0 - s_safe, 0.0, None)
        log_term = -np.log(s_safe)
        # (1-s)^(gamma-1) may be singular at s = 1, where log s = 0 anyway
        safe_base = np.where(one_minus > 0, one_minus, 1.0)
        pow_m1 = np.where(one_minus > 0, safe_base ** (gamma - 1.0), 0.0)
        dl_ds = -gamma * pow_m1 * log_term + one_minus ** gamma * dl_ds
    dl_ds = np.where(live, dl_ds, 0.0)
    grad[mask] = dl_ds[:, None] * pm * (qcol - s[:, None]) / n
    return grad


def complementary_logit_grad(logits, y_bar, q: TransitionMatrix) -> np.ndarray:
    return focal_complementary_logit_grad(logits, y_bar, q, 0.0)


def combined_logit_grad(logits, y, y_bar, q: TransitionMatrix, cfg: LossConfig) -> np.ndarray:
    g = masked_weighted_ce_logit_grad(logits, y, cfg.class_weights)
    if cfg.alpha:
        gamma = cfg.gamma if cfg.use_focal else 0.0
        g = g + cfg.alpha * focal_complementary_logit_grad(logits, y_bar, q, gamma)
    return g
