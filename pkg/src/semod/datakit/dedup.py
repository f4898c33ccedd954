"""Near-duplicate filtering over embedding vectors.

Greedy pass in ascending id order: an embedding is kept iff its
Euclidean distance to every previously kept embedding exceeds the
threshold; otherwise it joins the cluster of its nearest kept id.
Re-running on the kept set is the identity.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class EmbeddingVector:
    id: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("embedding id must be non-empty")
        if not self.values:
            raise ValidationError("embedding vector must be non-empty")
        if any(not math.isfinite(v) for v in self.values):
            raise ValidationError(f"embedding {self.id!r} has non-finite values")


def near_duplicate_filter(
    embeddings: list[EmbeddingVector], threshold: float
) -> tuple[list[str], dict[str, list[str]]]:
    """Greedy near-duplicate filter.

    Returns (kept ids in processing order, clusters) where ``clusters``
    maps each kept id to the dropped ids absorbed by it (possibly
    empty). Vectors must share one length; ids must be unique.
    """
    if not (math.isfinite(threshold) and threshold >= 0.0):
        raise ValidationError(f"threshold must be a finite value >= 0: {threshold}")
    if not embeddings:
        return [], {}
    lengths = {len(e.values) for e in embeddings}
    if len(lengths) > 1:
        raise ValidationError(f"embedding length mismatch: {sorted(lengths)}")
    ids = [e.id for e in embeddings]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate embedding ids")

    ordered = sorted(embeddings, key=lambda e: e.id)
    matrix = np.array([e.values for e in ordered], dtype=np.float64)

    kept_rows: list[int] = []
    kept_ids: list[str] = []
    clusters: dict[str, list[str]] = {}
    for row, emb in enumerate(ordered):
        if not kept_rows:
            kept_rows.append(row)
            kept_ids.append(emb.id)
            clusters[emb.id] = []
            continue
        dists = np.linalg.norm(matrix[kept_rows] - matrix[row], axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] > threshold:
            kept_rows.append(row)
            kept_ids.append(emb.id)
            clusters[emb.id] = []
        else:
            clusters[kept_ids[nearest]].append(emb.id)
    return kept_ids, clusters


def load_embeddings(path: str | Path) -> list[EmbeddingVector]:
    """Read embeddings from ``.csv`` (header ``id,...``, floats after the
    id column) or ``.npz`` (arrays ``ids`` and ``values``; the npy
    container fixes the byte order as little-endian ``<f8``)."""
    path = Path(path)
    if path.suffix == ".npz":
        data = np.load(path, allow_pickle=False)
        if "ids" not in data or "values" not in data:
            raise ValidationError(f"{path}: npz must contain 'ids' and 'values'")
        ids = [str(i) for i in data["ids"]]
        values = np.asarray(data["values"], dtype=np.float64)
        if values.ndim != 2 or len(ids) != values.shape[0]:
            raise ValidationError(f"{path}: 'values' must be (len(ids), dim)")
        return [EmbeddingVector(i, tuple(map(float, row))) for i, row in zip(ids, values)]
    embeddings = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0] != "id":
            raise ValidationError(f"{path}: expected a CSV header starting with 'id'")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: row width differs from header: {row}")
            embeddings.append(EmbeddingVector(row[0], tuple(float(v) for v in row[1:])))
    return embeddings


def save_embeddings(embeddings: list[EmbeddingVector], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix == ".npz":
        np.savez(
            tmp,
            ids=np.array([e.id for e in embeddings]),
            values=np.array([e.values for e in embeddings], dtype=np.float64),
        )
        # np.savez appends .npz to names lacking the suffix.
        saved = tmp if tmp.exists() else tmp.with_name(tmp.name + ".npz")
        os.replace(saved, path)
        return
    with tmp.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        dim = len(embeddings[0].values) if embeddings else 0
        writer.writerow(["id"] + [f"f{i}" for i in range(dim)])
        for e in embeddings:
            writer.writerow([e.id] + [repr(v) for v in e.values])
    os.replace(tmp, path)
