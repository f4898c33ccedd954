"""Classification and detection metrics.

Classification: binary SE/NS accuracy (the headline metric), binary F1
with SE as the positive class, per-fine-class TPR, and the 3x3
confusion matrix. Detection: IoU, greedy confidence-ordered matching,
interpolated average precision (all-points precision envelope), and
average recall at a single IoU threshold (0.5 by default; an optional
flag averages over 0.50:0.05:0.95). Fold results aggregate as
unweighted mean and population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .datakit.records import Box
from .taxonomy import FINE_INDEX, FINE_ORDER, BinaryLabel, FineLabel, to_binary

COCO_IOU_RANGE = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    """A scored box prediction; ``class_id`` is a free-form class name
    (e.g. "person" or a body-part wire name)."""

    box: Box
    class_id: str
    confidence: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence must be in [0, 1]: {self.confidence}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching: per-prediction TP flags in
    descending-confidence order (stable for ties), the matched GT index
    or None, and the count of ground-truth boxes left unmatched."""

    order: tuple[int, ...]
    tp_flags: tuple[bool, ...]
    matched_gt: tuple[int | None, ...]
    unmatched_gt: int


def match_detections(
    preds: list[Detection], gts: list[Box], iou_threshold: float
) -> MatchResult:
    """Greedy one-to-one matching at a fixed IoU threshold.

    Predictions are visited in descending confidence (input order on
    ties); each takes the highest-IoU still-unmatched ground truth with
    IoU >= threshold. A ground truth is consumed by at most one
    prediction.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"iou_threshold must be in (0, 1]: {iou_threshold}")
    order = tuple(
        i for i, _ in sorted(enumerate(preds), key=lambda item: -item[1].confidence)
    )
    taken = [False] * len(gts)
    tp_flags: list[bool] = []
    matched: list[int | None] = []
    for i in order:
        best_iou = 0.0
        best_j: int | None = None
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            value = iou(preds[i].box, gt)
            if value >= iou_threshold and value > best_iou:
                best_iou = value
                best_j = j
        if best_j is None:
            tp_flags.append(False)
            matched.append(None)
        else:
            taken[best_j] = True
            tp_flags.append(True)
            matched.append(best_j)
    return MatchResult(
        order=order,
        tp_flags=tuple(tp_flags),
        matched_gt=tuple(matched),
        unmatched_gt=len(gts) - sum(taken),
    )


def _ap_from_flags(tp_flags: list[bool], n_gt: int) -> float:
    """All-points interpolated AP from confidence-ordered TP flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1.0)
    # Precision envelope: at each point take the max precision to the right.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def average_precision(
    preds: list[Detection], gts: list[Box], iou_threshold: float = 0.5
) -> float:
    """Area under the interpolated precision-recall curve (all points).

    Depends only on the confidence ranking, not its scale. Defined as
    0.0 when there are no ground-truth boxes.
    """
    result = match_detections(preds, gts, iou_threshold)
    return _ap_from_flags(list(result.tp_flags), len(gts))


def average_recall(
    preds: list[Detection],
    gts: list[Box],
    iou_threshold: float = 0.5,
    max_dets: int = 100,
    coco_range: bool = False,
) -> float:
    """Fraction of ground truths matched by the top ``max_dets``
    predictions. With ``coco_range`` the value is averaged over the
    0.50:0.05:0.95 thresholds instead of the single threshold."""
    if not gts:
        return 0.0
    order = sorted(preds, key=lambda d: -d.confidence)[:max_dets]
    thresholds = COCO_IOU_RANGE if coco_range else (iou_threshold,)
    recalls = []
    for t in thresholds:
        result = match_detections(order, gts, t)
        recalls.append(sum(result.tp_flags) / len(gts))
    return float(np.mean(recalls))


def pooled_detection_metrics(
    samples: list[tuple[list[Detection], list[Box]]],
    iou_threshold: float = 0.5,
    max_dets: int = 100,
    coco_range: bool = False,
) -> tuple[float, float]:
    """(AP, AR) over a set of images: matching stays within each image,
    the PR curve pools all predictions by confidence."""
    flagged: list[tuple[float, bool]] = []
    n_gt = 0
    matched_total = 0
    for preds, gts in samples:
        n_gt += len(gts)
        kept = sorted(preds, key=lambda d: -d.confidence)[:max_dets]
        result = match_detections(kept, gts, iou_threshold)
        for rank, flag in zip(result.order, result.tp_flags):
            flagged.append((kept[rank].confidence, flag))
        matched_total += sum(result.tp_flags)
    flagged.sort(key=lambda item: -item[0])
    ap = _ap_from_flags([flag for _, flag in flagged], n_gt)
    if n_gt == 0:
        return ap, 0.0
    if not coco_range:
        return ap, matched_total / n_gt
    per_threshold = []
    for t in COCO_IOU_RANGE:
        matched = sum(
            sum(match_detections(sorted(p, key=lambda d: -d.confidence)[:max_dets], g, t).tp_flags)
            for p, g in samples
        )
        per_threshold.append(matched / n_gt)
    return ap, float(np.mean(per_threshold))


def detection_report(
    samples_by_class: dict[str, list[tuple[list[Detection], list[Box]]]],
    iou_threshold: float = 0.5,
    max_dets: int = 100,
    coco_range: bool = False,
) -> "DetectionReport":
    """Per-class pooled AP/AR plus their unweighted means across classes."""
    if not samples_by_class:
        raise ValidationError("detection_report requires at least one class")
    per_class: dict[str, dict[str, float]] = {}
    for cls in sorted(samples_by_class):
        ap, ar = pooled_detection_metrics(
            samples_by_class[cls], iou_threshold, max_dets, coco_range
        )
        per_class[cls] = {"ap_iou_0_5": ap, "ar": ar}
    return DetectionReport(
        ap_at_50=float(np.mean([v["ap_iou_0_5"] for v in per_class.values()])),
        ar=float(np.mean([v["ar"] for v in per_class.values()])),
        per_class=per_class,
    )


@dataclass(frozen=True)
class ClassificationReport:
    accuracy_binary: float
    f1_binary: float
    tpr_per_fine_class: dict[FineLabel, float | None]
    confusion: tuple[tuple[int, ...], ...]

    @property
    def accuracy_fine(self) -> float:
        total = sum(sum(row) for row in self.confusion)
        diag = sum(self.confusion[i][i] for i in range(3))
        return diag / total if total else 0.0

    def to_metrics_dict(self) -> dict[str, float | None]:
        return {
            "accuracy": self.accuracy_binary,
            "f1_score": self.f1_binary,
            "tpr_sexual_activity": self.tpr_per_fine_class[FineLabel.SEXUAL_ACTIVITY],
            "tpr_sexual_posing": self.tpr_per_fine_class[FineLabel.SEXUAL_POSING],
            "tpr_neutral": self.tpr_per_fine_class[FineLabel.NEUTRAL],
        }


@dataclass(frozen=True)
class DetectionReport:
    ap_at_50: float
    ar: float
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_metrics_dict(self) -> dict[str, float]:
        return {"ap_iou_0_5": self.ap_at_50, "ar": self.ar}


def classification_report(
    pred_labels: list[FineLabel], gt_labels: list[FineLabel]
) -> ClassificationReport:
    """Binary accuracy/F1 via the SE/NS coarsening plus per-fine-class
    TPR (None for classes absent from the ground truth)."""
    if not gt_labels:
        raise ValidationError("classification_report requires at least one sample")
    if len(pred_labels) != len(gt_labels):
        raise ValidationError(
            f"length mismatch: {len(pred_labels)} predictions vs {len(gt_labels)} labels"
        )
    confusion = [[0, 0, 0] for _ in range(3)]
    tp = fp = fn = 0
    correct_binary = 0
    for pred, gt in zip(pred_labels, gt_labels):
        confusion[FINE_INDEX[gt]][FINE_INDEX[pred]] += 1
        pred_b, gt_b = to_binary(pred), to_binary(gt)
        if pred_b is gt_b:
            correct_binary += 1
        if pred_b is BinaryLabel.SE and gt_b is BinaryLabel.SE:
            tp += 1
        elif pred_b is BinaryLabel.SE:
            fp += 1
        elif gt_b is BinaryLabel.SE:
            fn += 1
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    tpr: dict[FineLabel, float | None] = {}
    for label in FINE_ORDER:
        row = confusion[FINE_INDEX[label]]
        total = sum(row)
        tpr[label] = row[FINE_INDEX[label]] / total if total else None
    return ClassificationReport(
        accuracy_binary=correct_binary / len(gt_labels),
        f1_binary=f1,
        tpr_per_fine_class=tpr,
        confusion=tuple(tuple(row) for row in confusion),
    )


def aggregate_folds(
    reports: list[ClassificationReport] | list[DetectionReport],
) -> tuple[dict[str, float | None], dict[str, float | None]]:
    """Unweighted per-metric mean and population standard deviation.

    Metrics that are None in some folds are averaged over the folds
    where they are defined; a metric undefined everywhere stays None.
    """
    if not reports:
        raise ValidationError("aggregate_folds requires at least one report")
    kinds = {type(r) for r in reports}
    if len(kinds) > 1:
        raise ValidationError(f"reports must be of one kind, got {kinds}")
    dicts = [r.to_metrics_dict() for r in reports]
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    for key in dicts[0]:
        values = [d[key] for d in dicts if d[key] is not None]
        if values:
            mean[key] = float(np.mean(values))
            std[key] = float(np.std(values))
        else:
            mean[key] = None
            std[key] = None
    return mean, std
