"""Dataset model, ingestion, splitting, dedup, and synthetic generation."""

from .dedup import (
    EmbeddingVector,
    load_embeddings,
    near_duplicate_filter,
    save_embeddings,
)
from .folds import FoldAssignment, load_folds, save_folds, stratified_folds
from .records import (
    AgeGroup,
    BodyPart,
    BodyPartBox,
    Box,
    ImageRecord,
    PersonBox,
    Sex,
    class_counts,
    load_manifest,
    resolve_image_path,
    save_manifest,
    with_resolved_paths,
)
from .synthetic import (
    MARKER_COLORS,
    PROXY_CATEGORIES,
    PROXY_SOURCE_MAPPING,
    GeneratorConfig,
    allocate_class_counts,
    generate_synthetic_dataset,
    with_palette,
)

__all__ = [
    "AgeGroup",
    "BodyPart",
    "BodyPartBox",
    "Box",
    "EmbeddingVector",
    "FoldAssignment",
    "GeneratorConfig",
    "ImageRecord",
    "MARKER_COLORS",
    "PROXY_CATEGORIES",
    "PROXY_SOURCE_MAPPING",
    "PersonBox",
    "Sex",
    "allocate_class_counts",
    "class_counts",
    "generate_synthetic_dataset",
    "load_embeddings",
    "load_folds",
    "load_manifest",
    "near_duplicate_filter",
    "resolve_image_path",
    "save_embeddings",
    "save_folds",
    "save_manifest",
    "stratified_folds",
    "with_palette",
    "with_resolved_paths",
]
