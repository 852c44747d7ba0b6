"""Cross-entropy + Lovasz-softmax objective, IoU and mIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, softmax, softmax_backward


@dataclass
class LossWeights:
    ce: float = 1.0
    lovasz: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.ce) and np.isfinite(self.lovasz)):
            raise ValueError("loss weights must be finite")
        if self.ce < 0 or self.lovasz < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ce == 0 and self.lovasz == 0:
            raise ValueError("at least one loss weight must be positive")


def _flatten(logits, labels):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logit grid {logits.shape[:-1]} vs label grid {labels.shape}")
    flat_y = labels.reshape(-1).astype(np.int64)
    if flat_y.size and (flat_y.min() < 0 or flat_y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    return logits.reshape(-1, C), flat_y


def ce_loss(logits, labels, class_weights=None):
    """Mean voxel cross-entropy; optional per-class weights (weighted mean)."""
    x, y = _flatten(logits, labels)
    nll = -log_softmax(x)[np.arange(len(y)), y]
    if class_weights is None:
        return float(nll.mean())
    w = np.asarray(class_weights, dtype=float)[y]
    return float(np.sum(w * nll) / np.sum(w))


def ce_loss_backward(logits, labels, class_weights=None):
    x, y = _flatten(logits, labels)
    p = softmax(x)
    p[np.arange(len(y)), y] -= 1.0
    if class_weights is None:
        g = p / len(y)
    else:
        w = np.asarray(class_weights, dtype=float)[y]
        g = p * (w / np.sum(w))[:, None]
    return g.reshape(np.shape(logits))


def lovasz_grad(fg_sorted):
    """Gradient of the Jaccard Lovasz extension for errors sorted descending."""
    fg_sorted = np.asarray(fg_sorted, dtype=float)
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def _lovasz_terms(probs, y):
    """Per present class: (class, order, grad, errors)."""
    terms = []
    for c in np.unique(y):
        fg = (y == c).astype(float)
        err = np.abs(fg - probs[:, c])
        order = np.argsort(-err, kind="stable")
        terms.append((c, order, lovasz_grad(fg[order]), err, fg))
    return terms


def lovasz_softmax(logits, labels):
    """Mean over classes present in ``labels`` of the Lovasz-extended Jaccard loss."""
    x, y = _flatten(logits, labels)
    if y.size == 0:
        return 0.0
    probs = softmax(x)
    terms = _lovasz_terms(probs, y)
    return float(np.mean([err[order] @ g for _, order, g, err, _ in terms]))


def lovasz_softmax_backward(logits, labels):
    """Subgradient with the error ordering frozen."""
    x, y = _flatten(logits, labels)
    if y.size == 0:
        return np.zeros(np.shape(logits))
    probs = softmax(x)
    terms = _lovasz_terms(probs, y)
    dp = np.zeros_like(probs)
    for c, order, g, err, fg in terms:
        derr = np.empty_like(err)
        derr[order] = g / len(terms)
        dp[:, c] += derr * np.where(fg > 0, -1.0, 1.0)
    return softmax_backward(dp, probs).reshape(np.shape(logits))


def total_loss(logits, labels, weights: LossWeights | None = None):
    w = weights or LossWeights()
    out = 0.0
    if w.ce:
        out += w.ce * ce_loss(logits, labels)
    if w.lovasz:
        out += w.lovasz * lovasz_softmax(logits, labels)
    return out


def total_loss_backward(logits, labels, weights: LossWeights | None = None):
    w = weights or LossWeights()
    g = np.zeros(np.shape(logits))
    if w.ce:
        g += w.ce * ce_loss_backward(logits, labels)
    if w.lovasz:
        g += w.lovasz * lovasz_softmax_backward(logits, labels)
    return g


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def iou_per_class(pred, gt, k: int) -> float:
    """IoU of class ``k``; NaN when neither grid contains it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("label grids must share a shape")
    p = pred == k
    g = gt == k
    union = np.count_nonzero(p | g)
    if union == 0:
        return float("nan")
    return np.count_nonzero(p & g) / union


def class_ious(pred, gt, classes):
    return np.array([iou_per_class(pred, gt, k) for k in classes], dtype=float)


def default_classes(num_classes: int, include_empty: bool = False):
    return list(range(0 if include_empty else 1, num_classes))


def miou(pred, gt, classes) -> float:
    """Unweighted mean IoU over classes whose union is non-empty."""
    ious = class_ious(pred, gt, classes)
    valid = ious[~np.isnan(ious)]
    if valid.size == 0:
        raise ValueError("no class in the list occurs in either grid")
    return float(valid.mean())
