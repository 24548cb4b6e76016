"""Binary classification metrics, positive class only."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def f1_metrics(gold: np.ndarray, pred: np.ndarray) -> tuple[float, float, float]:
    """(f1, precision, recall) for class 1.

    Empty denominators score 0; if neither side contains a positive at all,
    the prediction is vacuously perfect and all three are 1.
    """
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise ShapeError(f"gold shape {gold.shape} incompatible with pred {pred.shape}")
    tp = int(((gold == 1) & (pred == 1)).sum())
    fp = int(((gold != 1) & (pred == 1)).sum())
    fn = int(((gold == 1) & (pred != 1)).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall
