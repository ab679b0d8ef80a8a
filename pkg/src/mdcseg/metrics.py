"""Segmentation evaluation metrics: Dice, mean IoU, Hausdorff distance,
and the cost-efficiency ratio for the meta-set-size study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalResult:
    miou: float
    dsc: float
    hd: float
    per_class_iou: list[float]


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|A∩B| / (|A|+|B|); 1 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int,
         foreground_only: bool = False) -> float:
    """Mean over classes of TP/(TP+FP+FN). A class absent from both maps
    scores IoU 1. foreground_only skips class 0 in the average."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size and (pred.max() >= n_classes or gt.max() >= n_classes):
        raise ValueError("labels out of range")
    ious = per_class_iou(pred, gt, n_classes)
    chosen = ious[1:] if foreground_only else ious
    return float(np.mean(chosen))


def per_class_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> list[float]:
    ious = []
    for c in range(n_classes):
        p = pred == c
        g = gt == c
        union = int((p | g).sum())
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(int((p & g).sum()) / union)
    return ious


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Positive pixels with at least one 8-neighbor outside the set;
    outside the image counts as outside the set."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.empty((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            interior &= padded[1 + dr:1 + dr + m.shape[0], 1 + dc:1 + dc + m.shape[1]]
    return np.argwhere(m & ~interior)


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets, Euclidean,
    in pixels. Empty vs empty is 0; empty vs non-empty is the image
    diagonal sqrt((H-1)^2 + (W-1)^2)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pe, ge = not pred.any(), not gt.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        h, w = pred.shape
        return float(np.hypot(h - 1, w - 1))
    a = _boundary_points(pred).astype(np.float64)
    b = _boundary_points(gt).astype(np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1)).max()
    d_ba = np.sqrt(d2.min(axis=0)).max()
    return float(max(d_ab, d_ba))


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> EvalResult:
    return EvalResult(miou=miou(pred, gt, n_classes),
                      dsc=dsc(pred > 0, gt > 0),
                      hd=hausdorff(pred > 0, gt > 0),
                      per_class_iou=per_class_iou(pred, gt, n_classes))


def cost_efficiency(delta_miou: float, time_i: float, time_ref: float,
                    mem_i: float, mem_ref: float) -> float:
    """Accuracy gain per multiplicative resource overhead:
    delta / ((time_i/time_ref) * (mem_i/mem_ref) - 1). Undefined (fault)
    when the resource ratio product is exactly 1."""
    if time_ref <= 0 or mem_ref <= 0 or time_i <= 0 or mem_i <= 0:
        raise ValueError("resource figures must be positive")
    overhead = (time_i / time_ref) * (mem_i / mem_ref) - 1.0
    if overhead == 0.0:
        raise ZeroDivisionError("cost efficiency undefined at unit resource ratio")
    return delta_miou / overhead
