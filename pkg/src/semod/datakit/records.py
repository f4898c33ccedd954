"""Dataset records and the JSON-lines manifest format.

A manifest is one JSON object per line with fields ``id``,
``image_path``, ``source_category``, ``fine_label``, ``warning_neutral``,
``person_boxes`` and ``part_boxes``. Image paths are resolved relative
to the manifest's directory. When a :class:`LabelMappingConfig` is
supplied, the fine label is derived from the source category and any
explicit ``fine_label`` on the line must agree; without a mapping the
explicit ``fine_label`` is required.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from ..errors import ManifestError, UnmappedCategoryError, ValidationError
from ..taxonomy import FineLabel, LabelMappingConfig, label_from_string

MANIFEST_SCHEMA_VERSION = "1"


class AgeGroup(Enum):
    MINOR = "minor"
    ADULT = "adult"
    UNKNOWN = "unknown"


class Sex(Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


class BodyPart(Enum):
    """The three SE-relevant part classes; breasts are deliberately
    not part of this set."""

    FEMALE_GENITALIA = "female_genitalia"
    MALE_GENITALIA = "male_genitalia"
    ANAL_AREA = "anal_area"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, corners (x_min, y_min)
    inclusive-exclusive to (x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if any(not math.isfinite(c) for c in coords):
            raise ValidationError(f"box coordinates must be finite: {coords}")
        if min(self.x_min, self.y_min) < 0:
            raise ValidationError(f"box coordinates must be >= 0: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"box must have positive extent: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_dict(self) -> dict[str, float]:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
        }


@dataclass(frozen=True)
class PersonBox:
    box: Box
    age_group: AgeGroup = AgeGroup.UNKNOWN
    sex: Sex = Sex.UNKNOWN
    activity: str = ""

    def to_dict(self) -> dict:
        d = self.box.to_dict()
        d.update(age_group=self.age_group.value, sex=self.sex.value, activity=self.activity)
        return d


@dataclass(frozen=True)
class BodyPartBox:
    box: Box
    part: BodyPart

    def to_dict(self) -> dict:
        d = self.box.to_dict()
        d["part"] = self.part.value
        return d


def _majority(values, unknown):
    """Majority vote; ties and empty input resolve to ``unknown``."""
    if not values:
        return unknown
    ranked = Counter(values).most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return unknown
    return ranked[0][0]


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: str
    fine_label: FineLabel
    source_category: str = ""
    warning_neutral: bool = False
    person_boxes: tuple[PersonBox, ...] = field(default_factory=tuple)
    part_boxes: tuple[BodyPartBox, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("record id must be non-empty")
        if not self.image_path:
            raise ValidationError("image_path must be non-empty")
        if self.warning_neutral and self.fine_label is not FineLabel.NEUTRAL:
            raise ValidationError(
                f"record {self.id}: warning_neutral requires a neutral fine label"
            )

    @property
    def split_attributes(self) -> dict[str, str]:
        """Stratum attributes: the source category plus the majority sex
        and age group over the person boxes (ties and no-person images
        fall back to unknown)."""
        sex = _majority([p.sex for p in self.person_boxes], Sex.UNKNOWN)
        age = _majority([p.age_group for p in self.person_boxes], AgeGroup.UNKNOWN)
        return {
            "source_category": self.source_category,
            "sex": sex.value,
            "age_group": age.value,
        }

    def stratum_key(self) -> tuple[str, str, str]:
        attrs = self.split_attributes
        return (attrs["source_category"], attrs["sex"], attrs["age_group"])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "source_category": self.source_category,
            "fine_label": self.fine_label.value,
            "warning_neutral": self.warning_neutral,
            "person_boxes": [p.to_dict() for p in self.person_boxes],
            "part_boxes": [p.to_dict() for p in self.part_boxes],
        }


def _box_from_dict(raw: dict) -> Box:
    return Box(
        x_min=float(raw["x_min"]),
        y_min=float(raw["y_min"]),
        x_max=float(raw["x_max"]),
        y_max=float(raw["y_max"]),
    )


def _record_from_dict(raw: dict, mapping: LabelMappingConfig | None) -> ImageRecord:
    source_category = raw.get("source_category", "")
    explicit = raw.get("fine_label")
    if mapping is not None:
        label = mapping.map(source_category)
        if explicit is not None and label_from_string(explicit) is not label:
            raise ValidationError(
                f"fine_label {explicit!r} disagrees with mapping for "
                f"category {source_category!r}"
            )
    else:
        if explicit is None:
            raise ValidationError("fine_label is required when no mapping is supplied")
        label = label_from_string(explicit)

    person_boxes = tuple(
        PersonBox(
            box=_box_from_dict(p),
            age_group=AgeGroup(p.get("age_group", "unknown")),
            sex=Sex(p.get("sex", "unknown")),
            activity=p.get("activity", ""),
        )
        for p in raw.get("person_boxes", [])
    )
    part_boxes = tuple(
        BodyPartBox(box=_box_from_dict(p), part=BodyPart(p["part"]))
        for p in raw.get("part_boxes", [])
    )
    return ImageRecord(
        id=str(raw["id"]),
        image_path=str(raw["image_path"]),
        fine_label=label,
        source_category=source_category,
        warning_neutral=bool(raw.get("warning_neutral", False)),
        person_boxes=person_boxes,
        part_boxes=part_boxes,
    )


def load_manifest(
    path: str | Path, mapping: LabelMappingConfig | None = None
) -> list[ImageRecord]:
    """Load and validate a JSON-lines manifest.

    Malformed lines raise :class:`ManifestError` naming the 1-based line
    number; an unmapped source category raises
    :class:`UnmappedCategoryError` naming the tag. Duplicate ids are
    rejected.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(raw, dict):
                raise ManifestError("expected a JSON object", lineno)
            try:
                record = _record_from_dict(raw, mapping)
            except UnmappedCategoryError:
                raise
            except (ValidationError, KeyError, ValueError, TypeError) as exc:
                raise ManifestError(str(exc), lineno) from None
            if record.id in seen:
                raise ManifestError(f"duplicate id {record.id!r}", lineno)
            seen.add(record.id)
            records.append(record)
    return records


def save_manifest(records: list[ImageRecord], path: str | Path) -> None:
    """Write records as JSON lines (atomically: temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def resolve_image_path(record: ImageRecord, manifest_path: str | Path) -> Path:
    """Resolve a record's image path relative to its manifest location."""
    p = Path(record.image_path)
    if p.is_absolute():
        return p
    return Path(manifest_path).parent / p


def with_resolved_paths(
    records: list[ImageRecord], manifest_path: str | Path
) -> list[ImageRecord]:
    """Copies whose image paths are absolute, resolved against the
    manifest's directory; safe to mix across manifests afterwards."""
    return [
        replace(r, image_path=str(resolve_image_path(r, manifest_path))) for r in records
    ]


def class_counts(records: list[ImageRecord]) -> tuple[dict[FineLabel, int], int]:
    """Exact per-class counts plus the warning-neutral count."""
    counts = {label: 0 for label in FineLabel}
    warning = 0
    for record in records:
        counts[record.fine_label] += 1
        if record.warning_neutral:
            warning += 1
    return counts, warning
