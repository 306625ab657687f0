"""Run configuration: a strict, JSON-backed description of one experiment.

Every nesting level rejects unknown keys so a typo like "epochz" fails loudly
instead of silently training with the default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationPolicy
from .data import CHANNEL_POLICIES, SplitSpec
from .models import ARCHITECTURES


class ConfigError(ValueError):
    pass


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 32
    seed: int = 10

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")

    def to_json(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "Hyperparameters":
        _reject_unknown(doc, {"learning_rate", "epochs", "batch_size", "seed"},
                        "hyperparameters")
        return cls(**doc)


@dataclass(frozen=True)
class DataConfig:
    """Either a class-directory tree to ingest/balance/split, or a prebuilt
    manifest with splits already assigned."""

    root: str | None = None
    manifest: str | None = None
    balance_seed: int = 0
    split: SplitSpec | None = None

    def __post_init__(self) -> None:
        if (self.root is None) == (self.manifest is None):
            raise ConfigError("data config needs exactly one of 'root' or 'manifest'")
        if self.root is not None and self.split is None:
            raise ConfigError("data config with 'root' needs a 'split' section")
        if self.manifest is not None and self.split is not None:
            raise ConfigError("a prebuilt 'manifest' already carries its splits")

    def to_json(self) -> dict:
        doc: dict = {}
        if self.root is not None:
            doc["root"] = self.root
            doc["balance_seed"] = self.balance_seed
            doc["split"] = self.split.to_json()
        else:
            doc["manifest"] = self.manifest
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "DataConfig":
        _reject_unknown(doc, {"root", "manifest", "balance_seed", "split"}, "data")
        split = None
        if "split" in doc:
            sdoc = dict(doc["split"])
            _reject_unknown(sdoc, {"seed", "test_fraction", "validation_fraction",
                                   "counts"}, "data.split")
            if "counts" in sdoc:
                sdoc["counts"] = tuple(sdoc["counts"])
            try:
                split = SplitSpec(**sdoc)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(root=doc.get("root"), manifest=doc.get("manifest"),
                   balance_seed=doc.get("balance_seed", 0), split=split)


@dataclass(frozen=True)
class RunConfig:
    architecture: str
    data: DataConfig
    output_dir: str
    width_scale: float = 1.0
    input_size: int = 256
    channel_policy: str = "replicate3"
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    augment_validation: bool = True
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture '{self.architecture}'; "
                f"choose from {sorted(ARCHITECTURES)}")
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError("width_scale must lie in (0, 1]")
        if self.input_size % 32 != 0:
            raise ConfigError("input_size must be a multiple of 32")
        if self.channel_policy not in CHANNEL_POLICIES:
            raise ConfigError(
                f"unknown channel_policy '{self.channel_policy}'; "
                f"choose from {sorted(CHANNEL_POLICIES)}")

    def to_json(self, *, include_output_dir: bool = True) -> dict:
        doc = {
            "architecture": self.architecture,
            "width_scale": self.width_scale,
            "input_size": self.input_size,
            "channel_policy": self.channel_policy,
            "data": self.data.to_json(),
            "augmentation": self.augmentation.to_json(),
            "augment_validation": self.augment_validation,
            "hyperparameters": self.hyperparameters.to_json(),
        }
        if include_output_dir:
            doc["output_dir"] = self.output_dir
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        _reject_unknown(doc, {"architecture", "width_scale", "input_size",
                              "channel_policy", "data", "augmentation",
                              "augment_validation", "hyperparameters",
                              "output_dir"}, "run config")
        for key in ("architecture", "data", "output_dir"):
            if key not in doc:
                raise ConfigError(f"run config is missing required key '{key}'")
        kwargs: dict = {
            "architecture": doc["architecture"],
            "data": DataConfig.from_json(doc["data"]),
            "output_dir": doc["output_dir"],
        }
        for key in ("width_scale", "input_size", "channel_policy",
                    "augment_validation"):
            if key in doc:
                kwargs[key] = doc[key]
        if "augmentation" in doc:
            try:
                kwargs["augmentation"] = AugmentationPolicy.from_json(doc["augmentation"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if "hyperparameters" in doc:
            kwargs["hyperparameters"] = Hyperparameters.from_json(doc["hyperparameters"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in '{path}': {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"'{path}' must hold a JSON object")
    return RunConfig.from_json(doc)
