"""Experiment harness: single runs, checkpoint evaluation, augmentation
sweeps and architecture comparisons.

Reproducibility contract: every random decision draws from a stream keyed by
the run seed plus a fixed stream id, so reordering one stage never perturbs
another.  Stream 0 seeds parameter init, stream 1 the per-epoch shuffle,
streams 2 and 3 the per-image train/validation augmentation (keyed further by
epoch and by the record's stable position in the manifest, so shuffling does
not change which transform an image receives).

Completed runs carry a content hash over everything except the output
directory and wall-clock time; two runs of the same config must hash equal.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from . import data as datamod
from . import models, plots
from .config import RunConfig
from .layers import NumericFault, softmax_cross_entropy
from .metrics import ClassificationReport, classification_report, confusion_matrix, report_json, report_text
from .optim import AdamHyper, adam_init, adam_step

log = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_AUGMENT_TRAIN = 2
STREAM_AUGMENT_VALIDATION = 3

COMPARE_ORDER = ("modified_vgg16", "resnet50", "densenet121")

ABLATION_COLUMNS = ("run_label", "rotation", "translation", "horizontal_flip",
                    "intensity_shift", "zoom", "test_accuracy")
COMPARISON_COLUMNS = ("architecture", "parameter_count", "test_accuracy",
                      "wall_seconds")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunRecord:
    status: str
    config: dict
    class_names: tuple[str, ...]
    parameter_count: int
    spec_hash: str
    history: tuple[dict, ...]
    test_accuracy: float | None
    test_report: dict | None
    confusion: tuple[tuple[int, ...], ...] | None
    wall_seconds: float
    content_hash: str | None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "config": self.config,
            "class_names": list(self.class_names),
            "parameter_count": self.parameter_count,
            "spec_hash": self.spec_hash,
            "history": list(self.history),
            "test_accuracy": self.test_accuracy,
            "test_report": self.test_report,
            "confusion": [list(r) for r in self.confusion] if self.confusion is not None else None,
            "wall_seconds": self.wall_seconds,
            "content_hash": self.content_hash,
            "error": self.error,
        }


def _content_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def resolve_manifest(config: RunConfig) -> datamod.DatasetManifest:
    """Materialize the split manifest a config describes."""
    if config.data.manifest is not None:
        return datamod.DatasetManifest.load(config.data.manifest)
    manifest = datamod.ingest(config.data.root)
    manifest = datamod.balance(manifest, config.data.balance_seed)
    return datamod.split(manifest, config.data.split)


def _load_split(manifest, split_name, input_size, channel_policy):
    """Preload one split: images, one-hot labels, integer labels and each
    record's stable index in the full manifest (the augmentation key)."""
    index_of = {id(r): i for i, r in enumerate(manifest.records)}
    records = manifest.by_split(split_name)
    if not records:
        return (np.zeros((0, input_size, input_size, 1), dtype=np.float32),
                np.zeros((0, len(manifest.class_names)), dtype=np.float32),
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    images, onehot = datamod.load_batch(records, manifest.class_names,
                                        (input_size, input_size), channel_policy)
    labels = onehot.argmax(axis=1).astype(np.int64)
    indices = np.array([index_of[id(r)] for r in records], dtype=np.int64)
    return images, onehot, labels, indices


def _augment_batch(images, indices, policy, seed, stream, epoch):
    out = np.empty_like(images)
    for k in range(images.shape[0]):
        rng = np.random.default_rng([seed, stream, epoch, int(indices[k])])
        params = aug.sample_params(policy, rng)
        out[k] = aug.apply(images[k], params)
    return out


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing single sample is folded into the
    previous batch because normalization statistics need at least two."""
    slices = [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        tail = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, tail.stop))
    return slices


def _infer_pass(spec, params, images, onehot, batch_size):
    """Average loss and accuracy over a split in inference mode."""
    n = images.shape[0]
    total_loss = 0.0
    correct = 0
    predictions = np.zeros(n, dtype=np.int64)
    for sl in [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]:
        logits = models.forward(spec, params, images[sl], mode="infer")
        loss, _ = softmax_cross_entropy(logits, onehot[sl])
        size = sl.stop - sl.start
        total_loss += loss * size
        pred = logits.argmax(axis=1)
        predictions[sl] = pred
        correct += int((pred == onehot[sl].argmax(axis=1)).sum())
    return total_loss / n, correct / n, predictions


def train(config: RunConfig) -> RunRecord:
    """Run one experiment end to end and write its artifacts.

    A non-finite loss or gradient marks the run failed (with the fault
    recorded) instead of raising, so sweep drivers can continue.
    """
    t0 = time.perf_counter()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hp = config.hyperparameters

    manifest = resolve_manifest(config)
    manifest.save(out_dir / "manifest.json")
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2)

    class_names = tuple(manifest.class_names)
    channels = 1 if config.channel_policy == "gray1" else 3
    input_shape = (config.input_size, config.input_size, channels)
    spec = models.build_model(config.architecture, input_shape,
                              len(class_names), config.width_scale)
    n_params = models.count_parameters(spec)
    s_hash = models.spec_hash(spec)

    params = models.init_params(spec, np.random.default_rng([hp.seed, STREAM_INIT]))
    state = adam_init(params, AdamHyper(learning_rate=hp.learning_rate))

    train_x, train_y, _, train_idx = _load_split(
        manifest, "train", config.input_size, config.channel_policy)
    val_x, val_y, _, val_idx = _load_split(
        manifest, "validation", config.input_size, config.channel_policy)
    test_x, test_y, test_labels, _ = _load_split(
        manifest, "test", config.input_size, config.channel_policy)
    if train_x.shape[0] < 2:
        raise datamod.CorpusError(
            f"training needs at least 2 samples, got {train_x.shape[0]}")

    policy = config.augmentation
    augment_train = policy.any_enabled
    augment_val = config.augment_validation and policy.any_enabled

    history: list[dict] = []
    config_payload = config.to_json(include_output_dir=False)

    def finish(status, test_accuracy=None, test_rep=None, cm=None, error=None):
        payload = None
        if status == "completed":
            payload = _content_hash({
                "config": config_payload,
                "class_names": list(class_names),
                "parameter_count": n_params,
                "spec_hash": s_hash,
                "history": history,
                "test_accuracy": test_accuracy,
                "confusion": [list(map(int, r)) for r in cm.counts],
            })
        record = RunRecord(
            status=status,
            config=config_payload,
            class_names=class_names,
            parameter_count=n_params,
            spec_hash=s_hash,
            history=tuple(history),
            test_accuracy=test_accuracy,
            test_report=report_json(test_rep) if test_rep is not None else None,
            confusion=tuple(tuple(map(int, r)) for r in cm.counts) if cm is not None else None,
            wall_seconds=round(time.perf_counter() - t0, 3),
            content_hash=payload,
            error=error,
        )
        with open(out_dir / "run_record.json", "w", encoding="utf-8") as fh:
            json.dump(record.to_json(), fh, indent=2)
        return record

    try:
        n_train = train_x.shape[0]
        for epoch in range(hp.epochs):
            order = np.random.default_rng([hp.seed, STREAM_SHUFFLE, epoch]).permutation(n_train)
            ex, ey, eidx = train_x[order], train_y[order], train_idx[order]
            if augment_train:
                ex = _augment_batch(ex, eidx, policy, hp.seed,
                                    STREAM_AUGMENT_TRAIN, epoch)
            epoch_loss = 0.0
            epoch_correct = 0
            for sl in _batch_slices(n_train, hp.batch_size):
                logits, caches = models.forward(spec, params, ex[sl],
                                                mode="train", return_cache=True)
                loss, grad = softmax_cross_entropy(logits, ey[sl])
                if not np.isfinite(loss):
                    raise NumericFault(
                        f"non-finite training loss at epoch {epoch + 1}, "
                        f"batch starting at sample {sl.start}")
                size = sl.stop - sl.start
                epoch_loss += loss * size
                epoch_correct += int((logits.argmax(axis=1) == ey[sl].argmax(axis=1)).sum())
                grads, _ = models.backward(spec, params, caches, grad)
                params, state = adam_step(params, grads, state)

            entry = {"epoch": epoch + 1,
                     "train_loss": round(epoch_loss / n_train, 6),
                     "train_accuracy": round(epoch_correct / n_train, 6)}
            if val_x.shape[0]:
                vx = val_x
                if augment_val:
                    vx = _augment_batch(val_x, val_idx, policy, hp.seed,
                                        STREAM_AUGMENT_VALIDATION, epoch)
                vl, va, _ = _infer_pass(spec, params, vx, val_y, hp.batch_size)
                entry["validation_loss"] = round(vl, 6)
                entry["validation_accuracy"] = round(va, 6)
            else:
                entry["validation_loss"] = None
                entry["validation_accuracy"] = None
            history.append(entry)
            log.info("epoch %d/%d loss %.4f acc %.4f", epoch + 1, hp.epochs,
                     entry["train_loss"], entry["train_accuracy"])
    except NumericFault as fault:
        log.warning("run failed: %s", fault)
        record = finish("failed", error=str(fault))
        return record

    if test_x.shape[0]:
        _, test_acc, predictions = _infer_pass(spec, params, test_x, test_y,
                                               hp.batch_size)
        cm = confusion_matrix(predictions, test_labels, class_names)
        rep = classification_report(cm)
        test_acc = round(rep.accuracy, 6)
    else:
        raise datamod.CorpusError("the manifest has no test split to evaluate")

    save_checkpoint(out_dir / "checkpoint.npz", spec, params, config, manifest)
    _write_curves_csv(out_dir / "curves.csv", history)
    plots.save_training_curves(history, out_dir / "curves.png")
    plots.save_confusion_matrix_figure(cm, out_dir / "confusion_matrix.png")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report_text(rep) + "\n")

    return finish("completed", test_accuracy=test_acc, test_rep=rep, cm=cm)


def _write_curves_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "train_loss", "train_accuracy",
                         "validation_loss", "validation_accuracy"))
        for h in history:
            writer.writerow((
                h["epoch"], f"{h['train_loss']:.6f}", f"{h['train_accuracy']:.6f}",
                "" if h["validation_loss"] is None else f"{h['validation_loss']:.6f}",
                "" if h["validation_accuracy"] is None else f"{h['validation_accuracy']:.6f}"))


def save_checkpoint(path, spec, params, config: RunConfig,
                    manifest: datamod.DatasetManifest) -> None:
    """Weights plus enough metadata to rebuild and re-evaluate the model."""
    arrays = {f"{node}/{pname}": arr
              for node, entry in params.items() for pname, arr in entry.items()}
    meta = {
        "spec": models.spec_to_json(spec),
        "spec_hash": models.spec_hash(spec),
        "config": config.to_json(include_output_dir=False),
        "class_names": list(manifest.class_names),
        "manifest": manifest.to_json(),
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Returns (spec, params, meta); fails on hash or shape mismatch."""
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    with archive:
        if "__meta__" not in archive:
            raise CheckpointError(f"checkpoint '{path}' has no metadata entry")
        meta = json.loads(str(archive["__meta__"][()]))
        spec = models.spec_from_json(meta["spec"])
        if models.spec_hash(spec) != meta["spec_hash"]:
            raise CheckpointError(
                f"checkpoint '{path}' metadata hash does not match its layer graph")
        expected = models.param_shapes(spec)
        params: dict[str, dict[str, np.ndarray]] = {}
        for key in archive.files:
            if key == "__meta__":
                continue
            node, _, pname = key.partition("/")
            if node not in expected or pname not in expected[node]:
                raise CheckpointError(f"unexpected parameter '{key}' in checkpoint")
            arr = archive[key]
            if arr.shape != expected[node][pname]:
                raise CheckpointError(
                    f"parameter '{key}' has shape {arr.shape}, "
                    f"expected {expected[node][pname]}")
            params.setdefault(node, {})[pname] = arr
        for node, entry in expected.items():
            missing = set(entry) - set(params.get(node, {}))
            if missing:
                raise CheckpointError(
                    f"checkpoint is missing parameters {sorted(missing)} for node '{node}'")
    return spec, params, meta


def evaluate(checkpoint_path, split_name: str, batch_size: int = 32):
    """Re-evaluate a checkpoint on one split of its embedded manifest.

    Returns (report, confusion matrix).
    """
    spec, params, meta = load_checkpoint(checkpoint_path)
    manifest = datamod.DatasetManifest.from_json(meta["manifest"])
    cfg = meta["config"]
    images, onehot, labels, _ = _load_split(
        manifest, split_name, cfg["input_size"], cfg["channel_policy"])
    if images.shape[0] == 0:
        raise datamod.CorpusError(f"split '{split_name}' holds no records")
    _, _, predictions = _infer_pass(spec, params, images, onehot, batch_size)
    cm = confusion_matrix(predictions, labels, tuple(manifest.class_names))
    return classification_report(cm), cm


def ablation_run_config(base: RunConfig, policy: aug.AugmentationPolicy) -> RunConfig:
    """Per-policy child config writing under <base output>/runs/<label>."""
    return dataclasses.replace(
        base, augmentation=policy,
        output_dir=str(Path(base.output_dir) / "runs" / policy.label()))


def ablate(config: RunConfig) -> list[dict]:
    """Train every flag subset (32 runs) and tabulate test accuracy.

    A failed run keeps its row with an empty accuracy; the sweep continues.
    """
    base_dir = Path(config.output_dir)
    base_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for policy in aug.enumerate_policies(config.augmentation):
        run_cfg = ablation_run_config(config, policy)
        label = policy.label()
        log.info("ablation run %s", label)
        try:
            record = train(run_cfg)
            accuracy = record.test_accuracy if record.status == "completed" else None
        except Exception as exc:
            log.warning("ablation run %s failed: %s", label, exc)
            accuracy = None
        rows.append({
            "run_label": label,
            **{flag: int(getattr(policy, flag)) for flag in aug.FLAG_ORDER},
            "test_accuracy": accuracy,
        })
    with open(base_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row["run_label"],
                             *[row[f] for f in aug.FLAG_ORDER],
                             "" if row["test_accuracy"] is None
                             else f"{row['test_accuracy']:.4f}"])
    plots.save_ablation_figure(rows, base_dir / "ablation.png")
    return rows


def compare_architectures(config: RunConfig) -> list[dict]:
    """Train each architecture on the same data and tabulate the outcomes."""
    base_dir = Path(config.output_dir)
    base_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for arch in COMPARE_ORDER:
        run_cfg = dataclasses.replace(
            config, architecture=arch,
            output_dir=str(base_dir / "runs" / arch))
        log.info("comparison run %s", arch)
        try:
            record = train(run_cfg)
            accuracy = record.test_accuracy if record.status == "completed" else None
            n_params = record.parameter_count
            wall = record.wall_seconds
        except Exception as exc:
            log.warning("comparison run %s failed: %s", arch, exc)
            channels = 1 if config.channel_policy == "gray1" else 3
            spec = models.build_model(
                arch, (config.input_size, config.input_size, channels),
                3, config.width_scale)
            accuracy, n_params, wall = None, models.count_parameters(spec), 0.0
        rows.append({"architecture": arch, "parameter_count": n_params,
                     "test_accuracy": accuracy, "wall_seconds": wall})
    with open(base_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_COLUMNS)
        for row in rows:
            writer.writerow([row["architecture"], row["parameter_count"],
                             "" if row["test_accuracy"] is None
                             else f"{row['test_accuracy']:.4f}",
                             f"{row['wall_seconds']:.3f}"])
    plots.save_comparison_figure(rows, base_dir / "comparison.png")
    return rows
