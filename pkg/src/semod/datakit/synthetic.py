"""Synthetic proxy-data generator.

Renders abstract scenes whose class is a deterministic function of the
rendered content, standing in for restricted real datasets:

* an "actor" is a filled shape (ellipse = female proxy, rectangle =
  male proxy) and is emitted as a person-proxy box;
* a "marker" is a small saturated patch drawn inside an actor and is
  emitted as a part-proxy box (one bright color per part class);
* two overlapping marked actors  -> proxy sexual activity,
  exactly one marked actor       -> proxy sexual posing,
  no markers anywhere            -> neutral.

Warning neutrals carry an unmarked skin-tone patch. The image-level
label always equals the max severity over per-actor labels derivable
from the emitted boxes alone: each marker sits in the strip exclusive
to its actor, and the posing actor never overlaps another actor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigError
from ..taxonomy import FineLabel, LabelMappingConfig
from .records import (
    AgeGroup,
    BodyPart,
    BodyPartBox,
    Box,
    ImageRecord,
    PersonBox,
    Sex,
    save_manifest,
)

MARKER_COLORS: dict[BodyPart, tuple[int, int, int]] = {
    BodyPart.FEMALE_GENITALIA: (255, 0, 255),
    BodyPart.MALE_GENITALIA: (255, 220, 0),
    BodyPart.ANAL_AREA: (0, 230, 255),
}
SKIN_TONE = (224, 172, 105)

DEFAULT_BACKGROUNDS = ((40, 44, 52), (60, 70, 60), (82, 76, 66), (36, 56, 76))
DEFAULT_ACTOR_COLORS = ((100, 110, 125), (92, 130, 110), (130, 105, 92), (116, 116, 86))
DEFAULT_DISTRACTOR_COLORS = ((158, 158, 150), (140, 150, 160))

PROXY_CATEGORIES = {
    FineLabel.SEXUAL_ACTIVITY: "proxy activity",
    FineLabel.SEXUAL_POSING: "proxy posing",
    FineLabel.NEUTRAL: "proxy neutral",
}

# Mapping that loads generated manifests through the category route.
PROXY_SOURCE_MAPPING = LabelMappingConfig(
    {tag: label for label, tag in PROXY_CATEGORIES.items()}
)

_ALLOWED_KEYS = {
    "n_samples",
    "image_size",
    "class_mix",
    "warning_fraction",
    "max_actors",
    "seed",
    "id_prefix",
    "background_colors",
    "actor_colors",
    "distractor_colors",
}


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    image_size: tuple[int, int] = (64, 64)
    class_mix: dict[FineLabel, float] = field(
        default_factory=lambda: {
            FineLabel.SEXUAL_ACTIVITY: 0.30,
            FineLabel.SEXUAL_POSING: 0.35,
            FineLabel.NEUTRAL: 0.35,
        }
    )
    warning_fraction: float = 0.4
    max_actors: int = 3
    seed: int = 0
    id_prefix: str = "syn"
    background_colors: tuple[tuple[int, int, int], ...] = DEFAULT_BACKGROUNDS
    actor_colors: tuple[tuple[int, int, int], ...] = DEFAULT_ACTOR_COLORS
    distractor_colors: tuple[tuple[int, int, int], ...] = DEFAULT_DISTRACTOR_COLORS

    def __post_init__(self) -> None:
        if self.n_samples < 0:
            raise ConfigError(f"n_samples must be >= 0: {self.n_samples}")
        w, h = self.image_size
        if w < 48 or h < 48:
            raise ConfigError(f"image_size must be at least 48x48: {self.image_size}")
        if set(self.class_mix) != set(FineLabel):
            raise ConfigError("class_mix must cover exactly the three fine labels")
        total = sum(self.class_mix.values())
        if any(v < 0 for v in self.class_mix.values()) or abs(total - 1.0) > 1e-9:
            raise ConfigError(f"class_mix fractions must be >= 0 and sum to 1: {self.class_mix}")
        if not 0.0 <= self.warning_fraction <= 1.0:
            raise ConfigError(f"warning_fraction must be in [0, 1]: {self.warning_fraction}")
        if self.max_actors < 2:
            raise ConfigError(f"max_actors must be >= 2: {self.max_actors}")
        if not self.id_prefix:
            raise ConfigError("id_prefix must be non-empty")

    @classmethod
    def from_file(cls, path: str | Path) -> "GeneratorConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"generator config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        if not isinstance(raw, dict):
            raise ConfigError("generator config must be a JSON object")
        unknown = set(raw) - _ALLOWED_KEYS
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        if "n_samples" not in raw:
            raise ConfigError("generator config requires n_samples")
        kwargs: dict = {"n_samples": int(raw["n_samples"])}
        if "image_size" in raw:
            kwargs["image_size"] = tuple(int(v) for v in raw["image_size"])
        if "class_mix" in raw:
            try:
                kwargs["class_mix"] = {
                    FineLabel(name): float(frac) for name, frac in raw["class_mix"].items()
                }
            except ValueError as exc:
                raise ConfigError(f"bad class_mix: {exc}") from None
        if "warning_fraction" in raw:
            kwargs["warning_fraction"] = float(raw["warning_fraction"])
        for key in ("max_actors", "seed"):
            if key in raw:
                kwargs[key] = int(raw[key])
        if "id_prefix" in raw:
            kwargs["id_prefix"] = str(raw["id_prefix"])
        for key in ("background_colors", "actor_colors", "distractor_colors"):
            if key in raw:
                kwargs[key] = tuple(tuple(int(c) for c in color) for color in raw[key])
        return cls(**kwargs)


def allocate_class_counts(n: int, mix: dict[FineLabel, float]) -> dict[FineLabel, int]:
    """Exact largest-remainder allocation of n samples to the class mix."""
    order = sorted(mix, key=lambda lbl: lbl.value)
    floors = {lbl: int(np.floor(n * mix[lbl])) for lbl in order}
    leftover = n - sum(floors.values())
    by_remainder = sorted(order, key=lambda lbl: (-(n * mix[lbl] - floors[lbl]), lbl.value))
    for lbl in by_remainder[:leftover]:
        floors[lbl] += 1
    return floors


def _rand_color(rng: np.random.Generator, palette) -> tuple[int, int, int]:
    return tuple(palette[int(rng.integers(len(palette)))])


def _marker_size(width: int) -> int:
    return max(5, width // 10)


def _place_actor(
    rng: np.random.Generator, width: int, height: int, minor: bool, min_side: int = 12
) -> Box:
    scale = 0.24 if minor else 0.38
    w = max(min_side, int(width * scale * float(rng.uniform(0.8, 1.2))))
    h = max(min_side, int(height * scale * float(rng.uniform(0.8, 1.2))))
    w, h = min(w, width - 4), min(h, height - 4)
    x0 = int(rng.integers(1, width - w))
    y0 = int(rng.integers(1, height - h))
    return Box(float(x0), float(y0), float(x0 + w), float(y0 + h))


def _overlapping_pair(
    rng: np.random.Generator, width: int, height: int, minor: bool, strip: int
) -> tuple[Box, Box]:
    """Two horizontally overlapping boxes, each keeping an exclusive
    vertical strip at least ``strip`` wide for its marker."""
    scale = 0.28 if minor else 0.40
    for _ in range(64):
        w1 = max(2 * strip, int(width * scale * float(rng.uniform(0.9, 1.2))))
        w2 = max(2 * strip, int(width * scale * float(rng.uniform(0.9, 1.2))))
        h1 = max(strip + 4, int(height * scale * float(rng.uniform(0.9, 1.2))))
        h2 = max(strip + 4, int(height * scale * float(rng.uniform(0.9, 1.2))))
        overlap = min(max(4, int(min(w1, w2) * 0.35)), min(w1, w2) - strip)
        span = w1 + w2 - overlap
        if overlap < 2 or span >= width - 2:
            continue
        x0 = int(rng.integers(1, width - span))
        top = max(h1, h2)
        if top >= height - 2:
            continue
        y0 = int(rng.integers(1, height - top))
        y1 = min(max(1, y0 + int(rng.integers(-3, 4))), height - h2 - 1)
        first = Box(float(x0), float(y0), float(x0 + w1), float(y0 + h1))
        second = Box(
            float(x0 + w1 - overlap), float(y1), float(x0 + w1 - overlap + w2), float(y1 + h2)
        )
        if _intersection_area(first, second) > 0.0:
            return first, second
    raise ConfigError(
        f"image_size {width}x{height} is too small to place overlapping actors"
    )


def _disjoint_actor(
    rng: np.random.Generator,
    width: int,
    height: int,
    minor: bool,
    others: list[Box],
    min_side: int = 12,
) -> Box | None:
    for _ in range(30):
        candidate = _place_actor(rng, width, height, minor, min_side)
        if all(_intersection_area(candidate, o) == 0.0 for o in others):
            return candidate
    return None


def _intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(0.0, iw) * max(0.0, ih)


def _marker_box(
    rng: np.random.Generator, region: tuple[float, float, float, float], size: int
) -> Box | None:
    x0, y0, x1, y1 = (int(v) for v in region)
    if x1 - x0 < size + 3 or y1 - y0 < size + 3:
        return None
    mx = int(rng.integers(x0 + 1, x1 - size - 1))
    my = int(rng.integers(y0 + 1, y1 - size - 1))
    return Box(float(mx), float(my), float(mx + size), float(my + size))


def _draw_actor(draw: ImageDraw.ImageDraw, box: Box, sex: Sex, color) -> None:
    xy = (box.x_min, box.y_min, box.x_max - 1, box.y_max - 1)
    if sex is Sex.FEMALE:
        draw.ellipse(xy, fill=color)
    else:
        draw.rectangle(xy, fill=color)


def _draw_marker(draw: ImageDraw.ImageDraw, box: Box, part: BodyPart) -> None:
    color = MARKER_COLORS[part]
    xy = (box.x_min, box.y_min, box.x_max - 1, box.y_max - 1)
    if part is BodyPart.FEMALE_GENITALIA:
        draw.ellipse(xy, fill=color)
    else:
        draw.rectangle(xy, fill=color)


def _render_sample(
    rng: np.random.Generator, config: GeneratorConfig, label: FineLabel, warning: bool
) -> tuple[Image.Image, list[PersonBox], list[BodyPartBox]]:
    width, height = config.image_size
    image = Image.new("RGB", (width, height), _rand_color(rng, config.background_colors))
    draw = ImageDraw.Draw(image)

    for _ in range(int(rng.integers(0, 3))):
        x0 = int(rng.integers(0, width - 8))
        y0 = int(rng.integers(0, height - 8))
        side = int(rng.integers(4, max(5, width // 8)))
        draw.rectangle(
            (x0, y0, min(x0 + side, width - 1), min(y0 + side, height - 1)),
            fill=_rand_color(rng, config.distractor_colors),
        )

    # One persona per image keeps the stratum attributes unambiguous.
    sex = Sex.FEMALE if rng.random() < 0.5 else Sex.MALE
    age = AgeGroup.MINOR if rng.random() < 0.5 else AgeGroup.ADULT
    minor = age is AgeGroup.MINOR
    size = _marker_size(width)
    strip = size + 4

    persons: list[PersonBox] = []
    parts: list[BodyPartBox] = []

    def add_person(box: Box, activity: str) -> None:
        persons.append(PersonBox(box=box, age_group=age, sex=sex, activity=activity))

    def add_marker(region) -> bool:
        marker = _marker_box(rng, region, size)
        if marker is None:
            return False
        options = list(BodyPart)
        part = options[int(rng.integers(len(options)))]
        _draw_marker(draw, marker, part)
        parts.append(BodyPartBox(box=marker, part=part))
        return True

    def add_extras(anchor_boxes: list[Box], count: int, activity: str = "none") -> None:
        placed = list(anchor_boxes)
        for _ in range(count):
            other = _disjoint_actor(rng, width, height, minor, placed)
            if other is None:
                continue
            _draw_actor(draw, other, sex, _rand_color(rng, config.actor_colors))
            add_person(other, activity)
            placed.append(other)

    if label is FineLabel.SEXUAL_ACTIVITY:
        first, second = _overlapping_pair(rng, width, height, minor, strip)
        _draw_actor(draw, first, sex, _rand_color(rng, config.actor_colors))
        _draw_actor(draw, second, sex, _rand_color(rng, config.actor_colors))
        # Exclusive strips: first owns [first.x_min, second.x_min),
        # second owns (first.x_max, second.x_max].
        if not add_marker((first.x_min, first.y_min, second.x_min, first.y_max)):
            raise ConfigError("internal: activity marker strip too small")
        if not add_marker((first.x_max, second.y_min, second.x_max, second.y_max)):
            raise ConfigError("internal: activity marker strip too small")
        add_person(first, "interaction")
        add_person(second, "interaction")
        add_extras([first, second], int(rng.integers(0, config.max_actors - 1)))
    elif label is FineLabel.SEXUAL_POSING:
        poser = None
        while poser is None:
            candidate = _place_actor(rng, width, height, minor, min_side=strip + 4)
            if candidate.width >= size + 4 and candidate.height >= size + 4:
                poser = candidate
        _draw_actor(draw, poser, sex, _rand_color(rng, config.actor_colors))
        region = (poser.x_min, poser.y_min, poser.x_max, poser.y_max)
        if not add_marker(region):
            raise ConfigError("internal: posing marker does not fit the actor")
        if rng.random() < 0.4:
            add_marker(region)
        add_person(poser, "posing")
        add_extras([poser], int(rng.integers(0, config.max_actors)))
    else:
        n_actors = int(rng.integers(1, config.max_actors + 1))
        add_extras([], n_actors)
        if warning and persons:
            # Nudity proxy: skin-tone patch, intentionally not a marker.
            target = persons[0].box
            patch = _marker_box(
                rng, (target.x_min, target.y_min, target.x_max, target.y_max), size
            )
            if patch is not None:
                draw.rectangle(
                    (patch.x_min, patch.y_min, patch.x_max - 1, patch.y_max - 1),
                    fill=SKIN_TONE,
                )
    return image, persons, parts


def generate_synthetic_dataset(
    config: GeneratorConfig, out_dir: str | Path, seed: int | None = None
) -> tuple[list[ImageRecord], Path]:
    """Render the dataset under ``out_dir`` and write its manifest.

    Returns (records, manifest path). Layout: ``images/<id>.png`` plus
    ``manifest.jsonl``; labels are correct by construction.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed if seed is None else seed)

    counts = allocate_class_counts(config.n_samples, config.class_mix)
    labels: list[FineLabel] = []
    for lbl in sorted(counts, key=lambda l: l.value):
        labels.extend([lbl] * counts[lbl])
    order = rng.permutation(len(labels))
    labels = [labels[int(j)] for j in order]

    n_neutral = counts[FineLabel.NEUTRAL]
    n_warning = int(round(n_neutral * config.warning_fraction))

    records: list[ImageRecord] = []
    neutral_seen = 0
    for i, label in enumerate(labels):
        warning = False
        if label is FineLabel.NEUTRAL:
            warning = neutral_seen < n_warning
            neutral_seen += 1
        image, persons, parts = _render_sample(rng, config, label, warning)
        record_id = f"{config.id_prefix}-{i:06d}"
        rel_path = f"images/{record_id}.png"
        image.save(images_dir / f"{record_id}.png")
        records.append(
            ImageRecord(
                id=record_id,
                image_path=rel_path,
                fine_label=label,
                source_category=PROXY_CATEGORIES[label],
                warning_neutral=warning,
                person_boxes=tuple(persons),
                part_boxes=tuple(parts),
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(records, manifest_path)
    return records, manifest_path


def with_palette(
    config: GeneratorConfig,
    backgrounds: tuple[tuple[int, int, int], ...],
    actors: tuple[tuple[int, int, int], ...],
) -> GeneratorConfig:
    """Palette-shifted copy, used to build auxiliary/target domain pairs."""
    return replace(config, background_colors=backgrounds, actor_colors=actors)
