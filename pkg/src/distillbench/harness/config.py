"""Experiment configuration: YAML schema, validation, and defaults."""

from __future__ import annotations

import inspect
import os
from dataclasses import dataclass, field

import yaml

from ..distill import METHODS

CONFIG_SCHEMA_VERSION = 1

DATA_ROOT_ENV = "DISTILLBENCH_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    dataset: dict = field(default_factory=lambda: {"name": "blobs-tiny", "root": "."})
    distill: dict = field(default_factory=lambda: {"method": "distribution-match", "ipc": 10})
    retrain: dict = field(default_factory=dict)
    audits: dict = field(default_factory=dict)
    repeats: int = 3

    RETRAIN_KEYS = {
        "archs", "epochs", "batch_size", "lr", "lr_schedule", "momentum",
        "weight_decay", "augment",
    }
    AUDIT_KEYS = {"accuracy", "mia", "robustness", "fairness"}

    def validate(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if "name" not in self.dataset:
            raise ConfigError("dataset.name is required")
        method = self.distill.get("method")
        if method not in METHODS:
            raise ConfigError(
                f"distill.method must be one of {sorted(METHODS)}, got {method!r}"
            )
        allowed = set(inspect.signature(METHODS[method].__init__).parameters) - {"self"}
        unknown = set(self.distill) - allowed - {"method"}
        if unknown:
            raise ConfigError(f"unknown distill fields for {method}: {sorted(unknown)}")
        unknown = set(self.retrain) - self.RETRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown retrain fields: {sorted(unknown)}")
        unknown = set(self.audits) - self.AUDIT_KEYS
        if unknown:
            raise ConfigError(f"unknown audit names: {sorted(unknown)}")
        if "mia" in self.audits:
            split = self.dataset.get("member_split")
            if not split or "members_per_class" not in split:
                raise ConfigError("mia audit requires dataset.member_split.members_per_class")
        return self

    def distiller_params(self):
        params = {k: v for k, v in self.distill.items() if k != "method"}
        params.setdefault("seed", self.seed)
        return params

    def data_root(self):
        return os.environ.get(DATA_ROOT_ENV, self.dataset.get("root", "."))

    def to_dict(self):
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "distill": self.distill,
            "retrain": self.retrain,
            "audits": self.audits,
            "repeats": self.repeats,
        }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    version = raw.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {version}")
    known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return ExperimentConfig(**raw).validate()


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
