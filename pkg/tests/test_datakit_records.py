import json

import pytest

from semod.datakit.records import (
    AgeGroup,
    BodyPart,
    BodyPartBox,
    Box,
    ImageRecord,
    PersonBox,
    Sex,
    class_counts,
    load_manifest,
    save_manifest,
    with_resolved_paths,
)
from semod.errors import ManifestError, UnmappedCategoryError, ValidationError
from semod.taxonomy import DEFAULT_SOURCE_MAPPING, FineLabel, LabelMappingConfig


def line(**overrides):
    base = {
        "id": "r1",
        "image_path": "images/r1.png",
        "source_category": "other neutral",
        "fine_label": "neutral",
        "warning_neutral": False,
        "person_boxes": [],
        "part_boxes": [],
    }
    base.update(overrides)
    return json.dumps(base)


def write_manifest(tmp_path, lines, name="m.jsonl"):
    path = tmp_path / name
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return path


# -- box and record invariants -------------------------------------------------


def test_box_validation():
    Box(0, 0, 1, 1)
    with pytest.raises(ValidationError):
        Box(2, 0, 1, 1)
    with pytest.raises(ValidationError):
        Box(0, 3, 1, 3)
    with pytest.raises(ValidationError):
        Box(-1, 0, 1, 1)


def test_warning_requires_neutral():
    with pytest.raises(ValidationError):
        ImageRecord(
            id="x", image_path="x.png", fine_label=FineLabel.SEXUAL_POSING,
            warning_neutral=True,
        )


def test_split_attributes_majority_and_ties():
    def person(sex, age):
        return PersonBox(box=Box(0, 0, 5, 5), sex=sex, age_group=age)

    record = ImageRecord(
        id="x", image_path="x.png", fine_label=FineLabel.NEUTRAL,
        source_category="c",
        person_boxes=(
            person(Sex.FEMALE, AgeGroup.MINOR),
            person(Sex.FEMALE, AgeGroup.ADULT),
            person(Sex.MALE, AgeGroup.ADULT),
        ),
    )
    attrs = record.split_attributes
    assert attrs["sex"] == "female"
    assert attrs["age_group"] == "adult"

    tied = ImageRecord(
        id="y", image_path="y.png", fine_label=FineLabel.NEUTRAL,
        source_category="c",
        person_boxes=(person(Sex.FEMALE, AgeGroup.MINOR), person(Sex.MALE, AgeGroup.MINOR)),
    )
    assert tied.split_attributes["sex"] == "unknown"
    assert tied.split_attributes["age_group"] == "minor"

    empty = ImageRecord(id="z", image_path="z.png", fine_label=FineLabel.NEUTRAL)
    assert empty.split_attributes["sex"] == "unknown"


# -- manifest loading ----------------------------------------------------------


def test_empty_file_gives_empty_list(tmp_path):
    assert load_manifest(write_manifest(tmp_path, [])) == []


def test_category_lookup_via_default_mapping(tmp_path):
    path = write_manifest(tmp_path, [line(fine_label=None)])
    records = load_manifest(path, DEFAULT_SOURCE_MAPPING)
    assert records[0].fine_label is FineLabel.NEUTRAL


def test_invalid_box_names_line_number(tmp_path):
    bad = line(
        id="r2",
        part_boxes=[{"x_min": 5, "y_min": 0, "x_max": 1, "y_max": 2, "part": "anal_area"}],
    )
    path = write_manifest(tmp_path, [line(), bad])
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(path)
    assert "line 2" in str(excinfo.value)


def test_malformed_json_names_line_number(tmp_path):
    path = write_manifest(tmp_path, [line(), "{not json"])
    with pytest.raises(ManifestError) as excinfo:
        load_manifest(path)
    assert "line 2" in str(excinfo.value)


def test_unmapped_category_names_tag(tmp_path):
    path = write_manifest(tmp_path, [line(source_category="mystery tag", fine_label=None)])
    with pytest.raises(UnmappedCategoryError) as excinfo:
        load_manifest(path, DEFAULT_SOURCE_MAPPING)
    assert "mystery tag" in str(excinfo.value)


def test_fine_label_required_without_mapping(tmp_path):
    path = write_manifest(tmp_path, [line(fine_label=None)])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_explicit_label_must_agree_with_mapping(tmp_path):
    path = write_manifest(tmp_path, [line(fine_label="sexual_posing")])
    with pytest.raises(ManifestError):
        load_manifest(path, DEFAULT_SOURCE_MAPPING)


def test_duplicate_ids_rejected(tmp_path):
    path = write_manifest(tmp_path, [line(), line()])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_save_load_round_trip(tmp_path):
    records = [
        ImageRecord(
            id="a",
            image_path="images/a.png",
            fine_label=FineLabel.SEXUAL_ACTIVITY,
            source_category="proxy activity",
            person_boxes=(
                PersonBox(
                    box=Box(1.0, 2.0, 11.0, 22.0),
                    age_group=AgeGroup.MINOR,
                    sex=Sex.FEMALE,
                    activity="interaction",
                ),
            ),
            part_boxes=(
                BodyPartBox(box=Box(3.0, 4.0, 8.0, 9.0), part=BodyPart.ANAL_AREA),
            ),
        ),
        ImageRecord(
            id="b",
            image_path="images/b.png",
            fine_label=FineLabel.NEUTRAL,
            source_category="proxy neutral",
            warning_neutral=True,
        ),
    ]
    path = tmp_path / "roundtrip.jsonl"
    save_manifest(records, path)
    assert load_manifest(path) == records
    # Saving again produces byte-identical output.
    first = path.read_bytes()
    save_manifest(load_manifest(path), path)
    assert path.read_bytes() == first


def test_explicit_mapping_round_trip_consistency(tmp_path):
    mapping = LabelMappingConfig({"proxy neutral": FineLabel.NEUTRAL})
    path = write_manifest(
        tmp_path, [line(source_category="proxy neutral", fine_label="neutral")]
    )
    records = load_manifest(path, mapping)
    assert records[0].fine_label is FineLabel.NEUTRAL


def test_with_resolved_paths(tmp_path):
    path = write_manifest(tmp_path, [line()])
    records = load_manifest(path)
    resolved = with_resolved_paths(records, path)
    assert resolved[0].image_path == str(tmp_path / "images/r1.png")


# -- class counts ----------------------------------------------------------------


def test_class_counts_empty():
    counts, warning = class_counts([])
    assert all(v == 0 for v in counts.values())
    assert warning == 0


def test_class_counts_mixed():
    records = [
        ImageRecord(id="1", image_path="x", fine_label=FineLabel.SEXUAL_ACTIVITY),
        ImageRecord(id="2", image_path="x", fine_label=FineLabel.SEXUAL_ACTIVITY),
        ImageRecord(
            id="3", image_path="x", fine_label=FineLabel.NEUTRAL, warning_neutral=True
        ),
    ]
    counts, warning = class_counts(records)
    assert counts[FineLabel.SEXUAL_ACTIVITY] == 2
    assert counts[FineLabel.SEXUAL_POSING] == 0
    assert counts[FineLabel.NEUTRAL] == 1
    assert warning == 1
