"""Training loss (smoothed class-weighted cross-entropy + multi-class Dice)
and evaluation metrics (per-class IoU, mean IoU, boundary IoU).

Metric counts are integers and mergeable by addition, so evaluation over a
dataset accumulates per-image counts and divides once at the end.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import value_of


def class_weights(masks, n_classes, floor=1e-6):
    """Inverse-sqrt-frequency weights, normalized to mean 1.

    masks: iterable of integer class maps (the training split). Frequencies
    are floored so empty classes stay finite; doubling every frequency leaves
    the normalized weights unchanged.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    total = 0
    for m in masks:
        counts += np.bincount(np.asarray(m).reshape(-1), minlength=n_classes)[:n_classes]
        total += m.size
    freq = np.maximum(counts / max(total, 1), floor)
    w = freq ** -0.5
    return w / w.mean()


def _one_hot(target, n_classes, dtype):
    t = np.asarray(target)
    if t.min() < 0 or t.max() >= n_classes:
        raise ValueError(f"target class {t.max()} out of range for K={n_classes}")
    oh = np.zeros((t.shape[0], n_classes) + t.shape[1:], dtype=dtype)
    for c in range(n_classes):
        oh[:, c][t == c] = 1.0
    return oh


def ce_smoothed(logits, target, weights=None, eps=0.1):
    """Label-smoothed softmax cross-entropy, scaled per pixel by the weight of
    the true class, averaged over all pixels.

    logits: (B, K, H, W); target: integer map (B, H, W).
    """
    shape = value_of(logits).shape
    k = shape[1]
    dtype = value_of(logits).dtype
    target = np.asarray(target)
    oh = _one_hot(target, k, dtype)
    q = (1.0 - eps) * oh + eps / k
    if weights is None:
        w_map = np.ones(target.shape, dtype=dtype)
    else:
        w_map = np.asarray(weights, dtype=dtype)[target]
    logp = ad.log_softmax(logits, axis=1)
    pixel_ce = ad.mul(ad.sum_(ad.mul(logp, q), axis=1), -1.0)   # (B,H,W)
    n_pix = target.size
    return ad.mul(ad.sum_(ad.mul(pixel_ce, w_map)), 1.0 / n_pix)


def dice_loss(probs, target, smooth=1.0):
    """1 - mean per-class Dice over the whole batch.

    dice_c = (2*sum(p_c * t_c) + smooth) / (sum(p_c^2) + sum(t_c^2) + smooth),
    with sums over every pixel; probabilities soft, targets one-hot.
    """
    k = value_of(probs).shape[1]
    oh = _one_hot(target, k, value_of(probs).dtype)
    axes = (0, 2, 3)
    inter = ad.sum_(ad.mul(probs, oh), axis=axes)
    denom = ad.add(ad.sum_(ad.mul(probs, probs), axis=axes), oh.sum(axis=axes))
    dice = ad.div(ad.add(ad.mul(inter, 2.0), smooth), ad.add(denom, smooth))
    return ad.sub(1.0, ad.mean(dice))


def total_loss(logits, target, weights=None, eps=0.1, dice_weight=1.0):
    """Smoothed weighted cross-entropy plus (equally weighted) Dice."""
    ce = ce_smoothed(logits, target, weights, eps)
    if dice_weight == 0.0:
        return ce
    probs = ad.softmax(logits, axis=1)
    return ad.add(ce, ad.mul(dice_loss(probs, target), dice_weight))


# ---------------------------------------------------------------------------
# evaluation metrics


def confusion_matrix(pred, gt, n_classes):
    """K x K counts, rows ground truth, columns prediction."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    if pred.max(initial=0) >= n_classes or gt.max(initial=0) >= n_classes:
        raise ValueError("class index out of range")
    return np.bincount(gt * n_classes + pred,
                       minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm):
    """Per-class IoU and the mean over classes present in pred or gt.

    Classes absent from both maps are excluded from the mean and reported as
    NaN in the per-class vector.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = denom > 0
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def miou(pred, gt, n_classes):
    """Region IoU per class plus the mean, from one confusion matrix."""
    return iou_from_confusion(confusion_matrix(pred, gt, n_classes))


def class_contour(binary):
    """Class pixels with at least one 4-neighbor outside the class, or lying
    on the image border."""
    b = np.asarray(binary, dtype=bool)
    inner = np.pad(b, 1, constant_values=False)
    core = (inner[:-2, 1:-1] & inner[2:, 1:-1] & inner[1:-1, :-2] & inner[1:-1, 2:])
    return b & ~core


def boundary_counts(pred, gt, n_classes, t=3):
    """Per-class (intersection, union) pixel counts of the boundary bands.

    The band for a class is its contour dilated by an L-inf square of radius
    t, intersected with the class mask, matching the usual boundary-IoU
    construction; with t large enough to cover the map the band becomes the
    whole region and the metric reduces to region IoU.
    """
    if t < 0:
        raise ValueError(f"tolerance t must be >= 0, got {t}")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    structure = np.ones((2 * t + 1, 2 * t + 1), dtype=bool)
    inter = np.zeros(n_classes, dtype=np.int64)
    union = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        bands = []
        for m in (pred, gt):
            mask = m == c
            contour = class_contour(mask)
            if t > 0:
                band = ndimage.binary_dilation(contour, structure=structure) & mask
            else:
                band = contour
            bands.append(band)
        inter[c] = int((bands[0] & bands[1]).sum())
        union[c] = int((bands[0] | bands[1]).sum())
    return inter, union


def boundary_iou(pred, gt, n_classes, t=3):
    """Per-class boundary IoU and the mean over classes with any boundary."""
    inter, union = boundary_counts(pred, gt, n_classes, t)
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean
