"""Training engine and reference backbone."""

from .backbone import (
    Backbone,
    BackboneClassifier,
    BackboneConfig,
    TinyConvNet,
    load_checkpoint,
    save_checkpoint,
)
from .engine import (
    FREEZE_BACKBONE,
    FREEZE_NONE,
    EpochStats,
    StageSpec,
    TrainHistory,
    default_image_loader,
    manifest_image_loader,
    predict_labels,
    pretrain_then_finetune,
    select_explicit_frames,
    train_stage,
)

__all__ = [
    "Backbone",
    "BackboneClassifier",
    "BackboneConfig",
    "EpochStats",
    "FREEZE_BACKBONE",
    "FREEZE_NONE",
    "StageSpec",
    "TinyConvNet",
    "TrainHistory",
    "default_image_loader",
    "load_checkpoint",
    "manifest_image_loader",
    "predict_labels",
    "pretrain_then_finetune",
    "save_checkpoint",
    "select_explicit_frames",
    "train_stage",
]
