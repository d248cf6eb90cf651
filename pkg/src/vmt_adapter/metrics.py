"""Evaluation metrics and the signed relative-improvement aggregate."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[t, p] of pixels with target class t predicted as p."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    return np.bincount(target * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou(conf: np.ndarray) -> float:
    """Mean IoU over classes that occur in prediction or target."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("mIoU undefined: no pixels")
    return float((inter[present] / union[present]).mean())


def angular_errors(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between predicted and target vectors (last axis)."""
    u = pred / np.maximum(np.linalg.norm(pred, axis=-1, keepdims=True), 1e-12)
    v = target / np.maximum(np.linalg.norm(target, axis=-1, keepdims=True), 1e-12)
    # half-angle form stays accurate near 0 and 180 degrees, unlike arccos
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=-1), np.linalg.norm(u + v, axis=-1)))


def delta_up(metrics: Sequence[float], baseline: Sequence[float], higher_is_better: Sequence[bool]) -> float:
    """Mean signed relative change versus a baseline, in percent.

    Lower-is-better metrics contribute with flipped sign.
    """
    if not (len(metrics) == len(baseline) == len(higher_is_better)) or not metrics:
        raise ValueError("metrics, baseline and directions must be non-empty and aligned")
    total = 0.0
    for m, b, hib in zip(metrics, baseline, higher_is_better):
        if b == 0:
            raise ValueError("delta_up undefined for a zero baseline value")
        total += (1.0 if hib else -1.0) * (m - b) / b
    return 100.0 * total / len(metrics)
