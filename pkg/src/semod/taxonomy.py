"""Label system for explicit-content moderation.

Three layers: a fine 3-class label (sexual activity / sexual posing /
neutral), a coarse binary label (SE = sexually explicit vs NS = not
sexual), and the final decision class (CSAM / adult pornography /
neutral) obtained by combining the coarse label with an age-presence
signal. All mappings here are pure, total lookup tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import UnmappedCategoryError, ValidationError


class FineLabel(Enum):
    """Fine-grained content class; values are the wire names."""

    SEXUAL_ACTIVITY = "sexual_activity"
    SEXUAL_POSING = "sexual_posing"
    NEUTRAL = "neutral"


class BinaryLabel(Enum):
    """Coarse content class: sexually explicit or not sexual."""

    SE = "se"
    NS = "ns"


class AgePresence(Enum):
    """Whether a minor is judged to be present in the image."""

    MINOR_PRESENT = "minor_present"
    ADULTS_ONLY = "adults_only"


class FinalClass(Enum):
    """Outcome of the two-stage decision."""

    CSAM = "csam"
    ADULT_PORNOGRAPHY = "adult_pornography"
    NEUTRAL = "neutral"


# Canonical component order shared by distributions, logits, and
# confusion matrices: index 0 = activity, 1 = posing, 2 = neutral.
FINE_ORDER: tuple[FineLabel, FineLabel, FineLabel] = (
    FineLabel.SEXUAL_ACTIVITY,
    FineLabel.SEXUAL_POSING,
    FineLabel.NEUTRAL,
)

FINE_INDEX: dict[FineLabel, int] = {label: i for i, label in enumerate(FINE_ORDER)}

_SEVERITY = {
    FineLabel.NEUTRAL: 1,
    FineLabel.SEXUAL_POSING: 2,
    FineLabel.SEXUAL_ACTIVITY: 3,
}

_COPINE = {
    FineLabel.SEXUAL_POSING: "L6",
    FineLabel.SEXUAL_ACTIVITY: "L7",
    FineLabel.NEUTRAL: "below-L6",
}


def to_binary(label: FineLabel) -> BinaryLabel:
    """Coarsen a fine label: both SE classes collapse to SE, neutral to NS."""
    if label is FineLabel.NEUTRAL:
        return BinaryLabel.NS
    return BinaryLabel.SE


def severity(label: FineLabel) -> int:
    """Severity rank: neutral(1) < sexual posing(2) < sexual activity(3)."""
    return _SEVERITY[label]


def csam_decision(age: AgePresence, se: BinaryLabel) -> FinalClass:
    """Two-stage decision: SE content with a minor present is CSAM,
    SE content with adults only is adult pornography, NS is neutral
    regardless of age."""
    if se is BinaryLabel.NS:
        return FinalClass.NEUTRAL
    if age is AgePresence.MINOR_PRESENT:
        return FinalClass.CSAM
    return FinalClass.ADULT_PORNOGRAPHY


def copine_map(label: FineLabel) -> str:
    """Nearest COPINE-scale level: posing ~ L6, activity ~ L7, neutral
    covers everything below L6."""
    return _COPINE[label]


def label_from_string(name: str) -> FineLabel:
    """Parse a wire-format fine label ("sexual_activity", ...)."""
    try:
        return FineLabel(name)
    except ValueError:
        raise ValidationError(f"unknown fine label: {name!r}") from None


@dataclass(frozen=True)
class LabelMappingConfig:
    """Source-category -> fine-label table supplied at ingestion.

    Lookups are exact string matches; a missing key raises rather than
    defaulting, so category drift in a manifest is caught loudly.
    """

    entries: dict[str, FineLabel] = field(default_factory=dict)

    def map(self, tag: str) -> FineLabel:
        try:
            return self.entries[tag]
        except KeyError:
            raise UnmappedCategoryError(tag) from None

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "LabelMappingConfig":
        return cls({tag: label_from_string(name) for tag, name in raw.items()})

    def to_dict(self) -> dict[str, str]:
        return {tag: label.value for tag, label in self.entries.items()}


def map_source_category(config: LabelMappingConfig, tag: str) -> FineLabel:
    """Look up a source-category tag; unknown tags raise UnmappedCategoryError."""
    return config.map(tag)


# Default guess for the ten source categories used by the upstream
# annotation team. The true table is not public: activity-type CSAM
# categories and adult pornography are treated as sexual activity,
# posing/erotism as sexual posing, plain nudity as neutral. Override
# with a JSON mapping file whenever a better table is available.
DEFAULT_SOURCE_MAPPING = LabelMappingConfig(
    {
        "adult pornography": FineLabel.SEXUAL_ACTIVITY,
        "minors only (CSAM)": FineLabel.SEXUAL_ACTIVITY,
        "minors & adults (CSAM)": FineLabel.SEXUAL_ACTIVITY,
        "in the presence of a minor (CSAM)": FineLabel.SEXUAL_ACTIVITY,
        "focus (CSAM)": FineLabel.SEXUAL_ACTIVITY,
        "other (CSAM)": FineLabel.SEXUAL_ACTIVITY,
        "sexual posing (CSAM)": FineLabel.SEXUAL_POSING,
        "child erotism": FineLabel.SEXUAL_POSING,
        "child nudity": FineLabel.NEUTRAL,
        "other neutral": FineLabel.NEUTRAL,
    }
)
