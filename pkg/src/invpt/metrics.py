"""Dense-prediction metrics and the multi-task gain."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

IGNORE_INDEX = 255


class UndefinedMetric(ValueError):
    """The metric has no defined value for the given inputs (e.g. empty mask)."""


def confusion(pred: np.ndarray, label: np.ndarray, num_classes: int,
              ignore: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    label = np.asarray(label).reshape(-1).astype(np.int64)
    keep = label != ignore
    idx = label[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred: np.ndarray, label: np.ndarray, num_classes: int,
         ignore: int = IGNORE_INDEX) -> float:
    """Class-mean IoU; classes absent from both prediction and label are skipped.

    Pixels labelled ``ignore`` are dropped. Raises :class:`UndefinedMetric`
    when every pixel is ignored.
    """
    cm = confusion(pred, label, num_classes, ignore)
    if cm.sum() == 0:
        raise UndefinedMetric("mIoU undefined: every label is ignored")
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


def rmse(pred: np.ndarray, label: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if mask is None:
        mask = np.ones(label.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), label.shape)
    n = int(mask.sum())
    if n == 0:
        raise UndefinedMetric("RMSE undefined: empty mask")
    d = (pred - label)[mask]
    return float(np.sqrt(np.dot(d, d) / n))


def mean_angle_error(pred: np.ndarray, label: np.ndarray, axis: int = 0) -> float:
    """Mean angle in degrees between predicted and unit label vectors.

    ``axis`` indexes the vector components; predictions are normalised here.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    norm = np.sqrt((pred * pred).sum(axis=axis, keepdims=True))
    unit = pred / np.maximum(norm, 1e-12)
    cos = np.clip((unit * label).sum(axis=axis), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Square (Chebyshev) dilation over the last two axes."""
    mask = np.asarray(mask, dtype=bool)
    out = mask.copy()
    h, w = mask.shape[-2:]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            src = mask[..., max(0, -dy): h - max(0, dy), max(0, -dx): w - max(0, dx)]
            out[..., max(0, dy): h - max(0, -dy), max(0, dx): w - max(0, -dx)] |= src
    return out


def boundary_counts(pred: np.ndarray, label: np.ndarray, tolerance: int = 1) -> tuple[int, int, int, int]:
    """(matched pred, total pred, matched label, total label) pixel counts."""
    pred = np.asarray(pred, dtype=bool)
    label = np.asarray(label, dtype=bool)
    return (int((pred & dilate(label, tolerance)).sum()), int(pred.sum()),
            int((label & dilate(pred, tolerance)).sum()), int(label.sum()))


def f1_from_counts(tp_p: int, n_p: int, tp_l: int, n_l: int) -> float:
    precision = tp_p / n_p if n_p else 0.0
    recall = tp_l / n_l if n_l else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f1(pred: np.ndarray, label: np.ndarray, tolerance: int = 1) -> float:
    """Pixel boundary F1 where a hit may lie within ``tolerance`` px."""
    return f1_from_counts(*boundary_counts(pred, label, tolerance))


def delta_m(multi: Sequence[float], single: Sequence[float],
            lower_is_better: Sequence[bool]) -> float:
    """Mean signed relative gain over single-task scores, in percent."""
    if not len(multi) == len(single) == len(lower_is_better):
        raise ValueError("delta_m needs equally many multi, single and direction entries")
    if not multi:
        raise ValueError("delta_m needs at least one task")
    total = 0.0
    for m, s, low in zip(multi, single, lower_is_better):
        if s == 0:
            raise UndefinedMetric("delta_m undefined for a zero single-task score")
        sign = -1.0 if low else 1.0
        total += sign * (m - s) / s
    return 100.0 * total / len(multi)


def delta_m_from_reports(multi: Mapping[str, Mapping[str, float]],
                         single: Mapping[str, Mapping[str, float]],
                         directions: Mapping[str, bool]) -> float:
    """Δ_m over nested ``{task: {metric: value}}`` reports.

    ``directions`` maps ``"task/metric"`` to lower_is_better.
    """
    ms, ss, lows = [], [], []
    for key, low in directions.items():
        task, metric = key.split("/")
        if task not in single or metric not in single[task]:
            raise ValueError(f"baseline report lacks {key}")
        ms.append(multi[task][metric])
        ss.append(single[task][metric])
        lows.append(low)
    return delta_m(ms, ss, lows)
