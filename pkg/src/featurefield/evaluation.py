"""Segmentation and reconstruction metrics: mIoU/mAcc, PSNR, depth error.

Confusion counts are keyed [reference, predicted]; elements whose reference
carries the ignore index are skipped. Class means run over classes that
actually appear in the reference, so absent classes never drag the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene_io import IGNORE_INDEX


class EvaluationError(ValueError):
    """Raised for invalid metric inputs (bad indices, empty evaluations)."""


class ConfusionMatrix:
    """K x K accumulation of (reference, predicted) counts."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        if num_classes < 1:
            raise EvaluationError("need at least one class")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predicted, reference) -> "ConfusionMatrix":
        """Add one batch of predictions; ignore-indexed references are skipped."""
        pred = np.asarray(predicted).reshape(-1)
        ref = np.asarray(reference).reshape(-1)
        if pred.shape != ref.shape:
            raise EvaluationError(
                f"prediction count {pred.shape} != reference count {ref.shape}")
        keep = ref != self.ignore_index
        pred = pred[keep]
        ref = ref[keep]
        k = self.num_classes
        for name, arr in (("prediction", pred), ("reference", ref)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = arr[(arr < 0) | (arr >= k)][0]
                raise EvaluationError(f"{name} index {bad} outside [0, {k})")
        flat = ref.astype(np.int64) * k + pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise EvaluationError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


@dataclass(frozen=True)
class SegmentationMetrics:
    miou: float
    macc: float
    per_class_iou: np.ndarray    # nan for classes absent from the reference
    per_class_acc: np.ndarray
    present: np.ndarray          # bool per class


def miou_macc(cm: ConfusionMatrix) -> SegmentationMetrics:
    """IoU_k = TP/(TP+FP+FN), acc_k = TP/(TP+FN), means over present classes."""
    if cm.total == 0:
        raise EvaluationError("confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    present = counts.sum(axis=1) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = tp / (tp + fp + fn)
        acc = tp / (tp + fn)
    iou = np.where(present, iou, np.nan)
    acc = np.where(present, acc, np.nan)
    return SegmentationMetrics(
        miou=float(np.nanmean(iou[present])) if present.any() else math.nan,
        macc=float(np.nanmean(acc[present])) if present.any() else math.nan,
        per_class_iou=iou, per_class_acc=acc, present=present)


def mask_background(reference: np.ndarray, predicted: np.ndarray,
                    background_index: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Reference copy with background-predicted elements marked ignore.

    Background means the ray hit nothing; such pixels are excluded from the
    evaluation rather than counted as errors against some class.
    """
    ref = np.array(reference, copy=True)
    ref[np.asarray(predicted) == background_index] = ignore_index
    return ref


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf when equal."""
    img = np.asarray(image, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if img.shape != ref.shape:
        raise EvaluationError(f"image shape {img.shape} != reference {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def depth_mae(depth: np.ndarray, reference: np.ndarray,
              mask: np.ndarray | None = None) -> float:
    """Mean absolute depth error in meters over mask-valid pixels."""
    d = np.asarray(depth, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if d.shape != r.shape:
        raise EvaluationError(f"depth shape {d.shape} != reference {r.shape}")
    valid = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EvaluationError("depth_mae: no valid pixels under the mask")
    return float(np.mean(np.abs(d[valid] - r[valid])))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def format_metrics_table(labels: list, metrics: SegmentationMetrics) -> str:
    width = max([len(l) for l in labels] + [5])
    lines = [f"{'class':<{width}}  {'IoU':>7}  {'acc':>7}"]
    for i, label in enumerate(labels):
        if metrics.present[i]:
            lines.append(f"{label:<{width}}  {metrics.per_class_iou[i]:7.4f}  "
                         f"{metrics.per_class_acc[i]:7.4f}")
        else:
            lines.append(f"{label:<{width}}  {'--':>7}  {'--':>7}")
    lines.append(f"{'mIoU':<{width}}  {metrics.miou:7.4f}")
    lines.append(f"{'mAcc':<{width}}  {metrics.macc:7.4f}")
    return "\n".join(lines)


def write_metrics_json(path, labels: list, metrics: SegmentationMetrics) -> None:
    record = {
        "miou": metrics.miou,
        "macc": metrics.macc,
        "classes": [
            {
                "label": label,
                "iou": None if not metrics.present[i] else float(metrics.per_class_iou[i]),
                "acc": None if not metrics.present[i] else float(metrics.per_class_acc[i]),
                "present": bool(metrics.present[i]),
            }
            for i, label in enumerate(labels)
        ],
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n")
