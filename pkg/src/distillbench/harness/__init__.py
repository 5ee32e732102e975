"""Experiment orchestration: config, pipeline, CLI."""

from .config import CONFIG_SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config, save_config
from .pipeline import (
    AuditReport,
    cross_architecture_eval,
    emit_report,
    export_embeddings,
    prepare_origin,
    retrain_on,
    run_experiment,
)

__all__ = [
    "AuditReport",
    "CONFIG_SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "cross_architecture_eval",
    "emit_report",
    "export_embeddings",
    "load_config",
    "prepare_origin",
    "retrain_on",
    "run_experiment",
    "save_config",
]
