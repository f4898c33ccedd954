"""Two-stage training engine over a pluggable backbone.

Each stage minimizes the mean hierarchical cross-entropy over shuffled
mini-batches with a first-order optimizer (adam by default). Epoch
shuffles draw from an RNG keyed by (seed, stage, epoch) and checkpoints
embed optimizer state, so a resumed run is bit-equivalent to an
uninterrupted one. Optimizer, batch size, learning rate, and epoch
counts are artifact knobs with documented defaults, not published
settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from ..datakit.records import (
    ImageRecord,
    load_manifest,
    resolve_image_path,
    with_resolved_paths,
)
from ..errors import ConfigError, TrainingDiverged, ValidationError
from ..evalkit import classification_report
from ..hloss import DEFAULT_ALPHA, batch_hierarchical_ce_from_logits
from ..taxonomy import FINE_INDEX, FINE_ORDER, FineLabel
from .backbone import TinyConvNet, save_checkpoint

FREEZE_NONE = "none"
FREEZE_BACKBONE = "backbone_frozen"
OPTIMIZERS = ("adam", "sgd")

RecordGroups = Sequence[tuple[Sequence[ImageRecord], float]]


@dataclass(frozen=True)
class StageSpec:
    name: str
    epochs: int
    learning_rate: float = 1e-3
    alpha: float = DEFAULT_ALPHA
    batch_size: int = 32
    freeze: str = FREEZE_NONE
    optimizer: str = "adam"
    dataset_refs: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("stage name must be non-empty")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1: {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0: {self.learning_rate}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1]: {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1: {self.batch_size}")
        if self.freeze not in (FREEZE_NONE, FREEZE_BACKBONE):
            raise ConfigError(f"freeze must be one of {FREEZE_NONE!r}, {FREEZE_BACKBONE!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.dataset_refs:
            weights = [w for _, w in self.dataset_refs]
            if any(w <= 0 for w in weights):
                raise ConfigError(f"mixing weights must be positive: {weights}")
            if abs(sum(weights) - 1.0) > 1e-9:
                raise ConfigError(f"mixing weights must sum to 1: {weights}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    val_accuracy: float
    val_f1: float


@dataclass
class TrainHistory:
    stage: str
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def select_explicit_frames(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Keep only records carrying at least one body-part box; the
    selection rule for auxiliary pornography-style data."""
    return [r for r in records if r.part_boxes]


def default_image_loader(record: ImageRecord) -> np.ndarray:
    with Image.open(record.image_path) as img:
        return np.asarray(img.convert("RGB"))


def manifest_image_loader(manifest_path: str | Path) -> Callable[[ImageRecord], np.ndarray]:
    """Loader resolving record paths relative to their manifest."""

    def load(record: ImageRecord) -> np.ndarray:
        with Image.open(resolve_image_path(record, manifest_path)) as img:
            return np.asarray(img.convert("RGB"))

    return load


class _Optimizer:
    """Adam / SGD over the backbone's named parameters. State is a flat
    name-keyed dict of arrays so checkpoints can embed it."""

    def __init__(self, kind: str, learning_rate: float, trainable: frozenset[str]):
        self.kind = kind
        self.lr = np.float32(learning_rate)
        self.trainable = trainable
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.state: dict[str, np.ndarray] = {"t": np.zeros(1, dtype=np.float64)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if state:
            self.state = {k: v.copy() for k, v in state.items()}
            self.state.setdefault("t", np.zeros(1, dtype=np.float64))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.kind == "sgd":
            for name in params:
                if name in self.trainable:
                    params[name] -= self.lr * grads[name]
            return
        self.state["t"][0] += 1.0
        t = self.state["t"][0]
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name in params:
            if name not in self.trainable:
                continue
            g = grads[name]
            m = self.state.setdefault(f"m:{name}", np.zeros_like(g))
            v = self.state.setdefault(f"v:{name}", np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / np.float32(bias1)
            v_hat = v / np.float32(bias2)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))


def _normalize_groups(
    train_records: Sequence[ImageRecord] | RecordGroups,
) -> list[tuple[list[ImageRecord], float]]:
    if not train_records:
        raise ValidationError("train records must be non-empty")
    first = train_records[0]
    if isinstance(first, ImageRecord):
        return [(list(train_records), 1.0)]  # type: ignore[arg-type]
    groups = [(list(records), float(weight)) for records, weight in train_records]  # type: ignore[misc]
    if any(not g for g, _ in groups):
        raise ValidationError("every dataset group must be non-empty")
    total = sum(w for _, w in groups)
    return [(g, w / total) for g, w in groups]


def _stage_rng(seed: int, stage: str, epoch: int) -> np.random.Generator:
    digest = hashlib.sha256(stage.encode()).digest()
    stage_key = int.from_bytes(digest[:4], "big")
    return np.random.default_rng([seed, stage_key, epoch])


def _load_arrays(
    backbone: TinyConvNet,
    records: Sequence[ImageRecord],
    image_loader: Callable[[ImageRecord], np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([backbone.preprocess(image_loader(r)) for r in records])
    targets = np.array([FINE_INDEX[r.fine_label] for r in records], dtype=np.int64)
    return images, targets


def predict_labels(
    backbone: TinyConvNet,
    images: np.ndarray,
    batch_size: int = 128,
) -> list[FineLabel]:
    """Argmax fine labels for preprocessed images (ties go to severity)."""
    labels = []
    for start in range(0, images.shape[0], batch_size):
        logits = backbone.forward(images[start : start + batch_size])
        # FINE_ORDER is severity-descending, so argmax's first-wins tie
        # rule is exactly the severity tie-break.
        for row in logits:
            labels.append(FINE_ORDER[int(np.argmax(row))])
    return labels


def train_stage(
    backbone: TinyConvNet,
    spec: StageSpec,
    train_records: Sequence[ImageRecord] | RecordGroups,
    val_records: Sequence[ImageRecord],
    seed: int,
    *,
    image_loader: Callable[[ImageRecord], np.ndarray] = default_image_loader,
    checkpoint_dir: str | Path | None = None,
    start_epoch: int = 0,
    optimizer_state: dict[str, np.ndarray] | None = None,
    quiet: bool = True,
    on_epoch: Callable[[str, EpochStats], None] | None = None,
) -> tuple[TinyConvNet, TrainHistory]:
    """Run one training stage; returns the mutated backbone and history.

    Deterministic for fixed (seed, spec, records): epoch shuffles are
    keyed by (seed, stage, absolute epoch), so resuming from a
    checkpoint at ``start_epoch`` with its optimizer state continues the
    exact run. Raises :class:`TrainingDiverged` on non-finite loss.
    """
    groups = _normalize_groups(train_records)
    if not val_records:
        raise ValidationError("validation records must be non-empty")

    loaded = [(_load_arrays(backbone, records, image_loader), weight) for records, weight in groups]
    val_images, _ = _load_arrays(backbone, val_records, image_loader)
    val_labels = [r.fine_label for r in val_records]

    trainable = (
        backbone.head_parameter_names()
        if spec.freeze == FREEZE_BACKBONE
        else frozenset(backbone.params)
    )
    optimizer = _Optimizer(spec.optimizer, spec.learning_rate, trainable)
    if optimizer_state:
        optimizer.load_state(optimizer_state)

    history = TrainHistory(stage=spec.name)
    n_total = sum(images.shape[0] for (images, _), _ in loaded)

    for epoch in range(start_epoch, start_epoch + spec.epochs):
        rng = _stage_rng(seed, spec.name, epoch)
        if len(loaded) == 1:
            (images, targets), _ = loaded[0]
            order = rng.permutation(images.shape[0])
            epoch_images, epoch_targets = images[order], targets[order]
        else:
            # Weighted per-sample draw from reshuffled group cursors.
            weights = np.array([w for _, w in loaded])
            picks = rng.choice(len(loaded), size=n_total, p=weights / weights.sum())
            cursors = [0] * len(loaded)
            orders = [rng.permutation(images.shape[0]) for (images, _), _ in loaded]
            rows_i, rows_t = [], []
            for g in picks:
                (images, targets), _ = loaded[g]
                idx = orders[g][cursors[g] % images.shape[0]]
                cursors[g] += 1
                rows_i.append(images[idx])
                rows_t.append(targets[idx])
            epoch_images = np.stack(rows_i)
            epoch_targets = np.array(rows_t, dtype=np.int64)

        loss_sum = 0.0
        for start in range(0, n_total, spec.batch_size):
            xb = epoch_images[start : start + spec.batch_size]
            tb = epoch_targets[start : start + spec.batch_size]
            logits = backbone.forward(xb)
            if not np.isfinite(logits).all():
                raise TrainingDiverged(
                    f"stage {spec.name!r} diverged at epoch {epoch}: non-finite logits"
                )
            losses, grads = batch_hierarchical_ce_from_logits(logits, tb, spec.alpha)
            batch_loss = float(losses.sum())
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"stage {spec.name!r} diverged at epoch {epoch}: non-finite loss"
                )
            loss_sum += batch_loss
            backbone.zero_grad()
            backbone.backward(grads / xb.shape[0])
            optimizer.step(backbone.params, backbone.gradients())

        mean_loss = loss_sum / n_total
        predictions = predict_labels(backbone, val_images)
        report = classification_report(predictions, val_labels)
        stats = EpochStats(
            epoch=epoch,
            mean_loss=mean_loss,
            val_accuracy=report.accuracy_binary,
            val_f1=report.f1_binary,
        )
        history.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(spec.name, stats)
        if not quiet:
            print(
                f"[{spec.name}] epoch {epoch}: loss {mean_loss:.4f} "
                f"val acc {report.accuracy_binary:.4f}"
            )
        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir) / f"{spec.name}_epoch{epoch:03d}.npz"
            save_checkpoint(
                backbone,
                ckpt,
                stage=spec.name,
                epoch=epoch,
                optimizer_state=optimizer.state,
            )
            history.checkpoints.append(str(ckpt))
    return backbone, history


def pretrain_then_finetune(
    backbone: TinyConvNet,
    stages: Sequence[StageSpec],
    validation_records: Sequence[ImageRecord],
    seed: int,
    *,
    resolve_ref: Callable[[str], list[ImageRecord]] | None = None,
    image_loader: Callable[[ImageRecord], np.ndarray] = default_image_loader,
    checkpoint_dir: str | Path | None = None,
    quiet: bool = True,
) -> tuple[TinyConvNet, list[TrainHistory]]:
    """Run stages sequentially, carrying parameters forward.

    Each stage's ``dataset_refs`` are resolved to record groups through
    ``resolve_ref`` (by default a plain manifest load, paths resolved
    against the manifest's directory).
    """
    if not stages:
        raise ValidationError("at least one stage is required")
    resolve = resolve_ref or (lambda ref: with_resolved_paths(load_manifest(ref), ref))
    histories: list[TrainHistory] = []
    for spec in stages:
        if not spec.dataset_refs:
            raise ConfigError(f"stage {spec.name!r} has no dataset_refs")
        groups = [(resolve(ref), weight) for ref, weight in spec.dataset_refs]
        backbone, history = train_stage(
            backbone,
            spec,
            groups,
            validation_records,
            seed,
            image_loader=image_loader,
            checkpoint_dir=checkpoint_dir,
            quiet=quiet,
        )
        histories.append(history)
    return backbone, histories
