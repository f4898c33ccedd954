"""Command-line orchestration.

One multi-command entry point (``semod``) wrapping the library: data
generation, fold splitting, near-duplicate filtering, training,
inference, and evaluation. Conventions: every command is deterministic
given its flags and seed; config errors exit 2, runtime failures exit
3; file outputs are written atomically (temp file, then rename); JSON
outputs carry a ``schema_version`` field. ``SEMOD_OUTPUT_ROOT`` sets
the default output root.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import UnidentifiedImageError

from . import __version__
from .datakit import (
    GeneratorConfig,
    generate_synthetic_dataset,
    load_embeddings,
    load_folds,
    load_manifest,
    near_duplicate_filter,
    save_folds,
    stratified_folds,
    with_resolved_paths,
)
from .datakit.records import ImageRecord
from .errors import (
    ConfigError,
    ManifestError,
    SemodError,
    TrainingDiverged,
    UnmappedCategoryError,
    ValidationError,
)
from .evalkit import (
    Detection,
    aggregate_folds,
    classification_report,
    detection_report,
)
from .pipelines import (
    FixedAgeEstimator,
    StaticDetector,
    classify_by_patches,
    classify_end_to_end,
    full_csam_pipeline,
    nudity_from_parts,
)
from .taxonomy import (
    DEFAULT_SOURCE_MAPPING,
    AgePresence,
    FineLabel,
    LabelMappingConfig,
    label_from_string,
)
from .training import (
    BackboneClassifier,
    BackboneConfig,
    StageSpec,
    TinyConvNet,
    load_checkpoint,
    save_checkpoint,
    train_stage,
)
from .training.engine import default_image_loader

SCHEMA_VERSION = "1"


def _output_root() -> Path:
    return Path(os.environ.get("SEMOD_OUTPUT_ROOT", "."))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, path)


def _load_mapping(value: str | None) -> LabelMappingConfig | None:
    if value is None:
        return None
    if value == "default":
        return DEFAULT_SOURCE_MAPPING
    path = Path(value)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"mapping file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: mapping must be a JSON object")
    return LabelMappingConfig.from_dict(raw)


def _guard(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TrainingDiverged as exc:
            click.echo(f"error: diverged: {exc}", err=True)
            sys.exit(3)
        except (
            ConfigError,
            ManifestError,
            UnmappedCategoryError,
            ValidationError,
            FileNotFoundError,
            UnidentifiedImageError,
        ) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except SemodError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Explicit-content moderation toolkit."""


@main.command("generate")
@click.option("--spec", "spec_path", required=True, type=click.Path(), help="Generator config JSON.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output dataset directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@_guard
def cmd_generate(spec_path: str, out_dir: str | None, seed: int | None) -> None:
    """Render a synthetic dataset and write its manifest."""
    config = GeneratorConfig.from_file(spec_path)
    out = Path(out_dir) if out_dir else _output_root() / "dataset"
    records, manifest = generate_synthetic_dataset(config, out, seed=seed)
    click.echo(f"wrote {len(records)} records to {manifest}")


@main.command("split")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--k", type=int, default=10, show_default=True, help="Number of folds.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None, help="Fold CSV path.")
@click.option("--mapping", default=None, help="Label mapping JSON path, or 'default'.")
@_guard
def cmd_split(manifest_path: str, k: int, seed: int, out_path: str | None, mapping: str | None) -> None:
    """Draw attribute-stratified cross-validation folds."""
    records = load_manifest(manifest_path, _load_mapping(mapping))
    folds = stratified_folds(records, k, seed)
    out = Path(out_path) if out_path else _output_root() / "folds.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_folds(folds, out)
    click.echo(f"wrote {k}-fold assignment for {len(records)} records to {out}")


@main.command("dedup")
@click.option("--embeddings", "embeddings_path", required=True, type=click.Path())
@click.option("--threshold", type=float, required=True, help="Euclidean distance threshold.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@_guard
def cmd_dedup(embeddings_path: str, threshold: float, out_dir: str | None) -> None:
    """Filter near-duplicate embeddings; write kept ids and clusters."""
    embeddings = load_embeddings(embeddings_path)
    kept, clusters = near_duplicate_filter(embeddings, threshold)
    out = Path(out_dir) if out_dir else _output_root() / "dedup"
    _write_lines(out / "kept.txt", kept)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "threshold": threshold,
        "clusters": [
            {"kept": kid, "members": [kid, *clusters[kid]]} for kid in kept
        ],
    }
    _write_json(out / "clusters.json", payload)
    click.echo(f"kept {len(kept)} of {len(embeddings)} embeddings; outputs in {out}")


# -- training ---------------------------------------------------------------

_STAGE_KEYS = {
    "name",
    "datasets",
    "epochs",
    "learning_rate",
    "alpha",
    "batch_size",
    "freeze",
    "optimizer",
}
_CONFIG_KEYS = {"seed", "backbone", "stages"}
_BACKBONE_KEYS = {"input_size", "channels", "init_seed"}


def _parse_train_config(path: Path) -> dict:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"training config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError("training config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    if "stages" not in raw or not raw["stages"]:
        raise ConfigError("training config requires a non-empty 'stages' list")
    backbone_raw = raw.get("backbone", {})
    unknown = set(backbone_raw) - _BACKBONE_KEYS
    if unknown:
        raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
    for stage in raw["stages"]:
        unknown = set(stage) - _STAGE_KEYS
        if unknown:
            raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
        if "name" not in stage or "epochs" not in stage or "datasets" not in stage:
            raise ConfigError("each stage requires 'name', 'epochs', and 'datasets'")
        for ds in stage["datasets"]:
            unknown = set(ds) - {"manifest", "weight"}
            if unknown:
                raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
            if "manifest" not in ds:
                raise ConfigError("each dataset entry requires 'manifest'")
    return raw


def _stage_specs(raw_stages: list[dict]) -> list[StageSpec]:
    specs = []
    for stage in raw_stages:
        datasets = stage["datasets"]
        weights = [float(ds.get("weight", 1.0)) for ds in datasets]
        total = sum(weights)
        if total <= 0:
            raise ConfigError(f"stage {stage['name']!r}: dataset weights must be positive")
        refs = tuple(
            (str(ds["manifest"]), w / total) for ds, w in zip(datasets, weights)
        )
        specs.append(
            StageSpec(
                name=str(stage["name"]),
                epochs=int(stage["epochs"]),
                learning_rate=float(stage.get("learning_rate", 1e-3)),
                alpha=float(stage.get("alpha", 0.5)),
                batch_size=int(stage.get("batch_size", 32)),
                freeze=str(stage.get("freeze", "none")),
                optimizer=str(stage.get("optimizer", "adam")),
                dataset_refs=refs,
            )
        )
    return specs


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path(), help="Target manifest.")
@click.option("--folds", "folds_path", required=True, type=click.Path(), help="Fold CSV for the target manifest.")
@click.option("--fold-index", type=int, required=True, help="Holdout fold used for validation.")
@click.option("--holdout-folds", type=int, default=1, show_default=True, help="Consecutive folds held out for validation.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--mapping", default=None, help="Label mapping JSON path, or 'default'.")
@click.option("--resume", "resume_path", type=click.Path(), default=None, help="Checkpoint to resume from.")
@_guard
def cmd_train(
    config_path: str,
    manifest_path: str,
    folds_path: str,
    fold_index: int,
    holdout_folds: int,
    out_dir: str | None,
    seed: int | None,
    mapping: str | None,
    resume_path: str | None,
) -> None:
    """Train per the staged config; write checkpoints and a JSONL log."""
    config_file = Path(config_path)
    raw = _parse_train_config(config_file)
    specs = _stage_specs(raw["stages"])
    seed = int(raw.get("seed", 0)) if seed is None else seed

    records = with_resolved_paths(
        load_manifest(manifest_path, _load_mapping(mapping)), manifest_path
    )
    folds = load_folds(folds_path)
    if not 0 <= fold_index < folds.k:
        raise ConfigError(f"fold-index must be in [0, {folds.k}): {fold_index}")
    if not 1 <= holdout_folds < folds.k:
        raise ConfigError(f"holdout-folds must be in [1, {folds.k}): {holdout_folds}")
    holdout = {(fold_index + i) % folds.k for i in range(holdout_folds)}
    missing = [r.id for r in records if r.id not in folds.assignment]
    if missing:
        raise ConfigError(f"records missing from fold file: {missing[:5]}")
    val_records = [r for r in records if folds.assignment[r.id] in holdout]
    target_train = [r for r in records if folds.assignment[r.id] not in holdout]
    if not val_records or not target_train:
        raise ConfigError("holdout selection left an empty train or validation set")

    def resolve_ref(ref: str) -> list[ImageRecord]:
        if ref == "target":
            return target_train
        path = Path(ref)
        if not path.is_absolute():
            path = config_file.parent / path
        return with_resolved_paths(load_manifest(path, _load_mapping(mapping)), path)

    backbone_raw = raw.get("backbone", {})
    backbone_config = BackboneConfig(
        input_size=int(backbone_raw.get("input_size", 32)),
        channels=tuple(backbone_raw.get("channels", (8, 16))),
    )
    out = Path(out_dir) if out_dir else _output_root() / "train"
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_lines: list[str] = []

    start_stage = 0
    start_epoch = 0
    optimizer_state: dict[str, np.ndarray] = {}
    if resume_path is not None:
        backbone, meta, optimizer_state = load_checkpoint(resume_path)
        if meta["config_fingerprint"] != backbone_config.fingerprint():
            raise ConfigError(
                "checkpoint backbone does not match the configured backbone"
            )
        names = [s.name for s in specs]
        if meta["stage"] not in names:
            raise ConfigError(f"checkpoint stage {meta['stage']!r} not in config stages")
        start_stage = names.index(meta["stage"])
        start_epoch = int(meta["epoch"]) + 1
        if log_path.exists():
            log_lines = log_path.read_text(encoding="utf-8").splitlines()
    else:
        backbone = TinyConvNet(backbone_config, seed=int(backbone_raw.get("init_seed", seed)))

    def on_epoch(stage_name: str, stats) -> None:
        log_lines.append(
            json.dumps(
                {
                    "schema_version": SCHEMA_VERSION,
                    "stage": stage_name,
                    "epoch": stats.epoch,
                    "mean_loss": stats.mean_loss,
                    "val_accuracy": stats.val_accuracy,
                    "val_f1": stats.val_f1,
                },
                sort_keys=True,
            )
        )
        _write_lines(log_path, log_lines)

    for i, spec in enumerate(specs[start_stage:], start=start_stage):
        stage_start = start_epoch if i == start_stage else 0
        remaining = spec.epochs - stage_start
        if remaining <= 0:
            continue
        run_spec = StageSpec(
            name=spec.name,
            epochs=remaining,
            learning_rate=spec.learning_rate,
            alpha=spec.alpha,
            batch_size=spec.batch_size,
            freeze=spec.freeze,
            optimizer=spec.optimizer,
            dataset_refs=spec.dataset_refs,
        )
        groups = [(resolve_ref(ref), weight) for ref, weight in spec.dataset_refs]
        backbone, _ = train_stage(
            backbone,
            run_spec,
            groups,
            val_records,
            seed,
            checkpoint_dir=ckpt_dir,
            start_epoch=stage_start,
            optimizer_state=optimizer_state if i == start_stage else None,
            on_epoch=on_epoch,
        )
        optimizer_state = {}
    final_path = out / "final.npz"
    save_checkpoint(
        backbone, final_path, stage=specs[-1].name, epoch=specs[-1].epochs - 1
    )
    click.echo(f"training complete; final checkpoint at {final_path}")


# -- inference --------------------------------------------------------------

STRATEGIES = ("end2end", "patch", "bodyparts", "csam")


def _person_detections(record: ImageRecord) -> list[Detection]:
    return [
        Detection(box=p.box, class_id="person", confidence=1.0)
        for p in record.person_boxes
    ]


def _part_detections(record: ImageRecord) -> list[Detection]:
    return [
        Detection(box=p.box, class_id=p.part.value, confidence=1.0)
        for p in record.part_boxes
    ]


def _age_estimator(stub: str, record: ImageRecord) -> FixedAgeEstimator:
    if stub == "minor":
        return FixedAgeEstimator(AgePresence.MINOR_PRESENT)
    if stub == "adult":
        return FixedAgeEstimator(AgePresence.ADULTS_ONLY)
    # "boxes": minors present iff any person box is annotated as a minor.
    from .datakit.records import AgeGroup

    present = any(p.age_group is AgeGroup.MINOR for p in record.person_boxes)
    return FixedAgeEstimator(
        AgePresence.MINOR_PRESENT if present else AgePresence.ADULTS_ONLY
    )


@main.command("infer")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--strategy", type=click.Choice(STRATEGIES), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--mapping", default=None, help="Label mapping JSON path, or 'default'.")
@click.option("--detector", type=click.Choice(["groundtruth"]), default=None,
              help="Detector backing the patch/bodyparts strategies.")
@click.option("--age-stub", type=click.Choice(["minor", "adult", "boxes"]), default=None,
              help="Age-presence stub for the csam strategy.")
@click.option("--conf-threshold", type=float, default=0.5, show_default=True)
@click.option("--padding", type=float, default=0.1, show_default=True, help="Patch padding fraction.")
@_guard
def cmd_infer(
    checkpoint_path: str | None,
    manifest_path: str,
    strategy: str,
    out_path: str | None,
    mapping: str | None,
    detector: str | None,
    age_stub: str | None,
    conf_threshold: float,
    padding: float,
) -> None:
    """Run an inference strategy over a manifest; write JSONL results."""
    if strategy in ("patch", "bodyparts") and detector is None:
        raise ConfigError(f"strategy {strategy!r} requires --detector")
    if strategy == "csam" and age_stub is None:
        raise ConfigError("strategy 'csam' requires --age-stub")
    needs_model = strategy in ("end2end", "patch", "csam")
    if needs_model and checkpoint_path is None:
        raise ConfigError(f"strategy {strategy!r} requires --checkpoint")

    records = with_resolved_paths(
        load_manifest(manifest_path, _load_mapping(mapping)), manifest_path
    )
    classifier = None
    if needs_model:
        backbone, _, _ = load_checkpoint(checkpoint_path)
        classifier = BackboneClassifier(backbone)

    lines = []
    for record in records:
        image = default_image_loader(record)
        if strategy == "end2end":
            result = classify_end_to_end(classifier, image).to_dict()
        elif strategy == "patch":
            result = classify_by_patches(
                StaticDetector(_person_detections(record)),
                classifier,
                image,
                conf_threshold=conf_threshold,
                padding_fraction=padding,
            ).to_dict()
        elif strategy == "bodyparts":
            flag = nudity_from_parts(
                StaticDetector(_part_detections(record)), image, conf_threshold
            )
            result = {
                "fine_label": None,
                "distribution": None,
                "patches": [],
                "nudity_flag": flag,
                "fallback_used": False,
                "final": None,
            }
        else:  # csam
            if detector == "groundtruth":
                se = lambda img, rec=record: classify_by_patches(  # noqa: E731
                    StaticDetector(_person_detections(rec)),
                    classifier,
                    img,
                    conf_threshold=conf_threshold,
                    padding_fraction=padding,
                )
            else:
                se = lambda img: classify_end_to_end(classifier, img)  # noqa: E731
            result = full_csam_pipeline(
                _age_estimator(age_stub, record), se, image
            ).to_dict()
        lines.append(
            json.dumps(
                {"schema_version": SCHEMA_VERSION, "id": record.id, "strategy": strategy, **result},
                sort_keys=True,
            )
        )
    out = Path(out_path) if out_path else _output_root() / "results.jsonl"
    _write_lines(out, lines)
    click.echo(f"wrote {len(lines)} results to {out}")


# -- evaluation --------------------------------------------------------------


def _load_results(path: Path) -> dict[str, dict]:
    results: dict[str, dict] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if "id" not in raw:
                raise ManifestError("result line lacks 'id'", lineno)
            results[str(raw["id"])] = raw
    return results


@main.command("eval")
@click.option("--results", "results_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--folds", "folds_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--mapping", default=None, help="Label mapping JSON path, or 'default'.")
@_guard
def cmd_eval(
    results_path: str,
    manifest_path: str,
    folds_path: str | None,
    out_path: str | None,
    mapping: str | None,
) -> None:
    """Score results against a manifest, per fold plus mean/std."""
    records = load_manifest(manifest_path, _load_mapping(mapping))
    results = _load_results(Path(results_path))
    missing = [r.id for r in records if r.id not in results]
    if missing:
        raise ConfigError(
            f"results missing for {len(missing)} manifest ids: {missing[:10]}"
        )

    if folds_path is not None:
        folds = load_folds(folds_path)
        absent = [r.id for r in records if r.id not in folds.assignment]
        if absent:
            raise ConfigError(f"records missing from fold file: {absent[:10]}")
        fold_of = lambda r: folds.assignment[r.id]  # noqa: E731
        k = folds.k
    else:
        fold_of = lambda r: 0  # noqa: E731
        k = 1

    has_labels = all(results[r.id].get("fine_label") is not None for r in records)
    has_nudity = all(results[r.id].get("nudity_flag") is not None for r in records)

    payload: dict = {
        "schema_version": SCHEMA_VERSION,
        "aggregation": "unweighted",
        "n_records": len(records),
        "folds": [],
    }

    if has_labels:
        payload["kind"] = "classification"
        reports = []
        for fold in range(k):
            members = [r for r in records if fold_of(r) == fold]
            if not members:
                continue
            preds = [label_from_string(results[r.id]["fine_label"]) for r in members]
            gts = [r.fine_label for r in members]
            report = classification_report(preds, gts)
            reports.append(report)
            entry = {"fold": fold, "n": len(members), **report.to_metrics_dict()}
            detection = _fold_detection_metrics(members, results)
            if detection is not None:
                entry.update(detection)
            payload["folds"].append(entry)
        mean, std = aggregate_folds(reports)
        payload["mean"] = mean
        payload["std"] = std
    elif has_nudity:
        payload["kind"] = "nudity"
        fold_dicts = []
        for fold in range(k):
            members = [r for r in records if fold_of(r) == fold]
            if not members:
                continue
            entry = {"fold": fold, "n": len(members), **_nudity_metrics(members, results)}
            payload["folds"].append(entry)
            fold_dicts.append(entry)
        metric_keys = [key for key in fold_dicts[0] if key not in ("fold", "n")]
        payload["mean"] = {
            key: (
                float(np.mean([d[key] for d in fold_dicts if d[key] is not None]))
                if any(d[key] is not None for d in fold_dicts)
                else None
            )
            for key in metric_keys
        }
        payload["std"] = {
            key: (
                float(np.std([d[key] for d in fold_dicts if d[key] is not None]))
                if any(d[key] is not None for d in fold_dicts)
                else None
            )
            for key in metric_keys
        }
    else:
        raise ConfigError("results carry neither fine labels nor nudity flags")

    out = Path(out_path) if out_path else _output_root() / "metrics.json"
    _write_json(out, payload)
    click.echo(f"wrote metrics to {out}")


def _fold_detection_metrics(
    members: list[ImageRecord], results: dict[str, dict]
) -> dict[str, float] | None:
    """Pooled AP/AR of result patch boxes against person ground truth;
    None when the results carry no patches at all."""
    from .datakit.records import Box

    samples = []
    any_patches = False
    for record in members:
        raw_patches = results[record.id].get("patches") or []
        preds = []
        for p in raw_patches:
            preds.append(
                Detection(
                    box=Box(p["x_min"], p["y_min"], p["x_max"], p["y_max"]),
                    class_id="person",
                    confidence=float(p.get("confidence", 1.0)),
                )
            )
        if preds:
            any_patches = True
        samples.append((preds, [pb.box for pb in record.person_boxes]))
    if not any_patches:
        return None
    report = detection_report({"person": samples})
    return report.to_metrics_dict()


def _nudity_metrics(members: list[ImageRecord], results: dict[str, dict]) -> dict:
    """Accuracy of the nudity flag against part-box ground truth,
    overall and per fine class."""
    per_class: dict[FineLabel, list[bool]] = {label: [] for label in FineLabel}
    overall: list[bool] = []
    for record in members:
        predicted = bool(results[record.id]["nudity_flag"])
        actual = len(record.part_boxes) > 0
        hit = predicted == actual
        overall.append(hit)
        per_class[record.fine_label].append(hit)
    out = {"accuracy": float(np.mean(overall))}
    for label in FineLabel:
        hits = per_class[label]
        out[f"accuracy_{label.value}"] = float(np.mean(hits)) if hits else None
    return out


if __name__ == "__main__":
    main()
