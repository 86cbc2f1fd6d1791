"""Dice overlap for label masks."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, ParameterError


def dice(pred_mask, gt_mask, class_id: int, num_classes: int = 4) -> float:
    """``2|A∩B| / (|A|+|B|)`` for one class; 1.0 when the class is absent from both."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"masks differ in shape: {pred.shape} vs {gt.shape}")
    if not 0 <= class_id < num_classes:
        raise ParameterError(f"unknown class {class_id} (expected 0..{num_classes - 1})")
    a = pred == class_id
    b = gt == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def per_class_dice(pred_masks: np.ndarray, gt_masks: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """Dice per foreground class (1..C-1), averaged over samples in index order."""
    scores = np.zeros((len(gt_masks), num_classes - 1))
    for n, (p, g) in enumerate(zip(pred_masks, gt_masks)):
        for c in range(1, num_classes):
            scores[n, c - 1] = dice(p, g, c, num_classes)
    return scores.mean(axis=0)
