"""Classification metrics and weight-distribution statistics.

All functions are pure; nothing here touches the autograd tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def confusion(pred, true, n_classes):
    """Count matrix with rows = true class, columns = predicted class."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise MetricError(
            f"label length mismatch: {pred.shape} vs {true.shape}")
    if len(pred) and (pred.max() >= n_classes or true.max() >= n_classes):
        raise MetricError("label outside [0, n_classes)")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_class_prf(cm):
    """Per-class precision, recall, F1 (zero where undefined), and support."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1),
                      0.0)
    return precision, recall, f1, support


def weighted_f1(cm):
    """Support-weighted mean of per-class F1 scores."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise MetricError("empty confusion matrix")
    _, _, f1, support = per_class_prf(cm)
    return float((f1 * support).sum() / support.sum())


def weighted_precision_recall(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise MetricError("empty confusion matrix")
    precision, recall, _, support = per_class_prf(cm)
    total = support.sum()
    return (float((precision * support).sum() / total),
            float((recall * support).sum() / total))


@dataclass
class WeightStats:
    layer: str
    task: int
    mean: float
    std: float
    skewness: float
    kurtosis: float
    convention: str = "population"


def layer_stats(weights, layer="", task=-1) -> WeightStats:
    """Population moments of a flattened weight array.

    Skewness is m3 / m2^(3/2); kurtosis is excess (m4 / m2^2 - 3), so a
    normal sample scores near zero.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size < 4:
        raise MetricError(f"need >= 4 values for moments, got {w.size}")
    mean = w.mean()
    centered = w - mean
    m2 = (centered ** 2).mean()
    if m2 == 0:
        raise MetricError("constant weights: skewness/kurtosis undefined")
    m3 = (centered ** 3).mean()
    m4 = (centered ** 4).mean()
    return WeightStats(layer=layer, task=task, mean=float(mean),
                       std=float(np.sqrt(m2)),
                       skewness=float(m3 / m2 ** 1.5),
                       kurtosis=float(m4 / m2 ** 2 - 3.0))


def scott_bandwidth(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    return float(values.std() * values.size ** (-1.0 / 5.0))


def kde(values, grid=None, bandwidth=None, grid_points=256):
    """Gaussian-kernel density estimate evaluated on a grid.

    The default grid spans the data range extended by four bandwidths on
    each side, which keeps the trapezoid integral within 1e-3 of one.
    Returns (grid, density).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise MetricError("kde needs at least one value")
    if bandwidth is None:
        bandwidth = scott_bandwidth(values)
        if bandwidth == 0:
            bandwidth = 1.0
    if bandwidth <= 0:
        raise MetricError(f"bandwidth must be positive, got {bandwidth}")
    if grid is None:
        lo = values.min() - 4.0 * bandwidth
        hi = values.max() + 4.0 * bandwidth
        grid = np.linspace(lo, hi, grid_points)
    else:
        grid = np.asarray(grid, dtype=np.float64)
    z = (grid[:, None] - values[None, :]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=1)
    density /= values.size * bandwidth * np.sqrt(2.0 * np.pi)
    return grid, density
