"""Inference strategies and their fusion.

Three ways to produce an image-level fine label: whole-image
classification, person-detection patch classification with max-severity
aggregation, and a body-part visibility test; plus the two-stage
combination with an age-presence estimator that yields the final
CSAM / adult pornography / neutral decision.

Images are numpy ``(H, W, 3) uint8`` arrays. Patch classification is
sequential and deterministic; all functions here are pure given
deterministic models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .datakit.records import Box
from .errors import ValidationError
from .evalkit import Detection
from .hloss import Prob3, argmax_label
from .taxonomy import AgePresence, FinalClass, FineLabel, csam_decision, severity, to_binary


class Classifier(Protocol):
    def predict(self, image: np.ndarray) -> Prob3: ...


class PersonDetector(Protocol):
    def detect(self, image: np.ndarray) -> list[Detection]: ...


class BodyPartDetector(Protocol):
    def detect(self, image: np.ndarray) -> list[Detection]: ...


class AgeEstimator(Protocol):
    def estimate(self, image: np.ndarray) -> AgePresence: ...


@dataclass(frozen=True)
class PatchOutcome:
    box: Box
    label: FineLabel
    distribution: Prob3
    confidence: float = 1.0


@dataclass(frozen=True)
class PipelineResult:
    fine_label: FineLabel
    distribution: Prob3 | None = None
    per_patch: tuple[PatchOutcome, ...] = field(default_factory=tuple)
    nudity_flag: bool | None = None
    fallback_used: bool = False
    final: FinalClass | None = None

    def to_dict(self) -> dict:
        return {
            "fine_label": self.fine_label.value,
            "distribution": (
                None
                if self.distribution is None
                else [
                    self.distribution.p_activity,
                    self.distribution.p_posing,
                    self.distribution.p_neutral,
                ]
            ),
            "patches": [
                {
                    **p.box.to_dict(),
                    "fine_label": p.label.value,
                    "distribution": [
                        p.distribution.p_activity,
                        p.distribution.p_posing,
                        p.distribution.p_neutral,
                    ],
                    "confidence": p.confidence,
                }
                for p in self.per_patch
            ],
            "nudity_flag": self.nudity_flag,
            "fallback_used": self.fallback_used,
            "final": None if self.final is None else self.final.value,
        }


def _check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def classify_end_to_end(model: Classifier, image: np.ndarray) -> PipelineResult:
    """Whole-image classification; exact probability ties resolve to the
    higher-severity label."""
    arr = _check_image(image)
    dist = model.predict(arr)
    return PipelineResult(fine_label=argmax_label(dist), distribution=dist)


def crop_patch(image: np.ndarray, box: Box, padding_fraction: float = 0.1) -> np.ndarray:
    """Crop ``box`` expanded by ``padding_fraction`` of its size per side,
    clamped to the image. A box with no pixel overlap is an error."""
    if not (math.isfinite(padding_fraction) and padding_fraction >= 0.0):
        raise ValidationError(f"padding_fraction must be >= 0: {padding_fraction}")
    arr = _check_image(image)
    h, w = arr.shape[:2]
    pad_x = padding_fraction * box.width
    pad_y = padding_fraction * box.height
    x0 = max(0, int(math.floor(box.x_min - pad_x)))
    y0 = max(0, int(math.floor(box.y_min - pad_y)))
    x1 = min(w, int(math.ceil(box.x_max + pad_x)))
    y1 = min(h, int(math.ceil(box.y_max + pad_y)))
    if x0 >= x1 or y0 >= y1:
        raise ValidationError(f"box {box} does not intersect a {w}x{h} image")
    return arr[y0:y1, x0:x1]


def aggregate_severity(labels: list[FineLabel]) -> FineLabel:
    """The label of maximal severity rank; one SE patch makes the whole
    image SE. Empty input is the caller's fallback case and an error."""
    if not labels:
        raise ValidationError("aggregate_severity requires at least one label")
    return max(labels, key=severity)


def classify_by_patches(
    detector: PersonDetector,
    model: Classifier,
    image: np.ndarray,
    conf_threshold: float = 0.5,
    padding_fraction: float = 0.1,
) -> PipelineResult:
    """Detect persons, classify each patch, aggregate by max severity.

    When no detection survives the confidence threshold the whole image
    is classified instead and the result is flagged as a fallback. The
    reported distribution is that of the first patch attaining the
    aggregated severity.
    """
    arr = _check_image(image)
    detections = [d for d in detector.detect(arr) if d.confidence >= conf_threshold]
    if not detections:
        whole = classify_end_to_end(model, arr)
        return PipelineResult(
            fine_label=whole.fine_label,
            distribution=whole.distribution,
            fallback_used=True,
        )
    patches: list[PatchOutcome] = []
    for det in detections:
        patch = crop_patch(arr, det.box, padding_fraction)
        dist = model.predict(patch)
        patches.append(
            PatchOutcome(
                box=det.box,
                label=argmax_label(dist),
                distribution=dist,
                confidence=det.confidence,
            )
        )
    label = aggregate_severity([p.label for p in patches])
    top = next(p for p in patches if p.label is label)
    return PipelineResult(
        fine_label=label, distribution=top.distribution, per_patch=tuple(patches)
    )


def nudity_from_parts(
    detector: BodyPartDetector, image: np.ndarray, conf_threshold: float = 0.5
) -> bool:
    """True iff any body-part detection reaches the confidence threshold."""
    arr = _check_image(image)
    return any(d.confidence >= conf_threshold for d in detector.detect(arr))


def full_csam_pipeline(
    age: AgeEstimator,
    se_strategy: Callable[[np.ndarray], PipelineResult],
    image: np.ndarray,
) -> PipelineResult:
    """Two-stage decision: the SE strategy's label, coarsened to SE/NS,
    combined with the age-presence estimate."""
    arr = _check_image(image)
    se_result = se_strategy(arr)
    final = csam_decision(age.estimate(arr), to_binary(se_result.fine_label))
    return PipelineResult(
        fine_label=se_result.fine_label,
        distribution=se_result.distribution,
        per_patch=se_result.per_patch,
        nudity_flag=se_result.nudity_flag,
        fallback_used=se_result.fallback_used,
        final=final,
    )


# Reference implementations of the pluggable interfaces.


class ConstantClassifier:
    """Always predicts a fixed distribution; evaluation plumbing."""

    def __init__(self, distribution: Prob3):
        self.distribution = distribution

    def predict(self, image: np.ndarray) -> Prob3:
        return self.distribution


class StaticDetector:
    """Serves a pre-computed detection list (e.g. ground-truth boxes),
    clamped to the image and dropped when fully outside."""

    def __init__(self, detections: list[Detection]):
        self.detections = list(detections)

    def detect(self, image: np.ndarray) -> list[Detection]:
        h, w = np.asarray(image).shape[:2]
        kept = []
        for det in self.detections:
            x0, y0 = max(0.0, det.box.x_min), max(0.0, det.box.y_min)
            x1, y1 = min(float(w), det.box.x_max), min(float(h), det.box.y_max)
            if x0 < x1 and y0 < y1:
                kept.append(
                    Detection(Box(x0, y0, x1, y1), det.class_id, det.confidence)
                )
        return kept


class FixedAgeEstimator:
    """Age stub returning a constant answer."""

    def __init__(self, presence: AgePresence):
        self.presence = presence

    def estimate(self, image: np.ndarray) -> AgePresence:
        return self.presence
