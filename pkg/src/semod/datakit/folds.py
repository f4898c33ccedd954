"""Attribute-stratified k-fold assignment.

Records are grouped by (source_category, sex, age_group); each stratum
is shuffled with a seeded RNG and dealt round-robin onto folds. The
starting fold rotates across strata (a running offset), so globally the
assignment is a balanced deal: every fold ends up with floor(N/k) or
ceil(N/k) records and per-stratum fold sizes differ by at most one.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import dataclass
from pathlib import Path

from ..errors import ValidationError
from .records import ImageRecord

FOLDS_CSV_HEADER = ("id", "fold")


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValidationError(f"k must be >= 2: {self.k}")
        bad = {i: f for i, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise ValidationError(f"fold indices out of range [0, {self.k}): {bad}")

    def fold_of(self, record_id: str) -> int:
        return self.assignment[record_id]

    def ids_in_fold(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes


def stratified_folds(
    records: list[ImageRecord], k: int, seed: int
) -> FoldAssignment:
    """Deal records into k folds, stratified by their split attributes.

    Deterministic for a given (records, k, seed); raises when k < 2 or
    k exceeds the record count.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2: {k}")
    if not records:
        raise ValidationError("no records to split")
    if k > len(records):
        raise ValidationError(f"k={k} exceeds record count {len(records)}")

    strata: dict[tuple[str, str, str], list[str]] = {}
    for record in records:
        strata.setdefault(record.stratum_key(), []).append(record.id)

    rng = random.Random(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for key in sorted(strata):
        members = sorted(strata[key])
        rng.shuffle(members)
        for j, record_id in enumerate(members):
            assignment[record_id] = (offset + j) % k
        offset = (offset + len(members)) % k
    return FoldAssignment(k=k, assignment=assignment)


def save_folds(folds: FoldAssignment, path: str | Path) -> None:
    """Write the ``id,fold`` CSV (sorted by id; atomic replace)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FOLDS_CSV_HEADER)
        for record_id in sorted(folds.assignment):
            writer.writerow([record_id, folds.assignment[record_id]])
    os.replace(tmp, path)


def load_folds(path: str | Path) -> FoldAssignment:
    path = Path(path)
    assignment: dict[str, int] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FOLDS_CSV_HEADER:
            raise ValidationError(f"expected header {','.join(FOLDS_CSV_HEADER)!r} in {path}")
        for row in reader:
            if len(row) != 2:
                raise ValidationError(f"malformed fold row: {row}")
            assignment[row[0]] = int(row[1])
    if not assignment:
        raise ValidationError(f"empty fold file: {path}")
    k = max(assignment.values()) + 1
    return FoldAssignment(k=max(k, 2), assignment=assignment)
