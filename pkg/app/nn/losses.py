"""
Loss functions. Each returns the scalar loss and its gradient with respect to
the network output, averaged over the batch (and pixels, for the pixelwise loss).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from app.nn.network import LossKind

_PROB_FLOOR = 1e-300
_BCE_CLIP = 1e-12


def cross_entropy(probs: np.ndarray, labels: np.ndarray, class_weights: Optional[Sequence[float]] = None):
    """Cross-entropy on softmax outputs, optionally weighted per class."""
    n = probs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(n)
    weights = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    picked = np.maximum(probs[rows, labels], _PROB_FLOOR)
    loss = float(np.sum(weights * -np.log(picked)) / n)
    grad = np.zeros_like(probs)
    grad[rows, labels] = -weights / (n * picked)
    return loss, grad


def binary_cross_entropy(probs: np.ndarray, targets: np.ndarray):
    """Pixelwise binary cross-entropy on sigmoid outputs."""
    p = np.clip(probs, _BCE_CLIP, 1.0 - _BCE_CLIP)
    t = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    count = p.size
    loss = float(-np.sum(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)) / count)
    grad = (p - t) / (p * (1.0 - p) * count)
    return loss, grad


def mean_squared_error(outputs: np.ndarray, targets: np.ndarray):
    t = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    diff = outputs - t
    n = outputs.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def loss_and_grad(kind: LossKind, outputs: np.ndarray, targets: np.ndarray, class_weights=None):
    if kind == LossKind.CROSS_ENTROPY:
        return cross_entropy(outputs, targets)
    if kind == LossKind.WEIGHTED_CROSS_ENTROPY:
        return cross_entropy(outputs, targets, class_weights)
    if kind == LossKind.BCE:
        return binary_cross_entropy(outputs, targets)
    if kind == LossKind.MSE:
        return mean_squared_error(outputs, targets)
    raise ValueError(f"Unsupported loss: {kind}")
