"""semod: explicit-content moderation toolkit.

Label taxonomy and two-stage CSAM decision, hierarchical cross-entropy
with analytic gradients, dataset curation (stratified folds,
near-duplicate filtering, synthetic proxy data), detection/classification
metrics, inference pipelines, and a seeded training engine. The CLI
entry point is ``semod``.
"""

__version__ = "0.1.0"

from . import datakit, evalkit, hloss, pipelines, taxonomy, training  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    ManifestError,
    SemodError,
    TrainingDiverged,
    UnmappedCategoryError,
    ValidationError,
)
