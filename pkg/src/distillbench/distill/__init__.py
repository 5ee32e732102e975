"""Distillation engines and the synthetic-dataset container."""

from __future__ import annotations

from dataclasses import dataclass, field

from .base import (
    SYNTHETIC_SCHEMA_VERSION,
    BaseDistiller,
    FormationSpec,
    SyntheticDataset,
    formation_decode,
    init_synthetic,
    load_synthetic,
    save_synthetic,
)
from .distribution import DistributionMatchingDistiller
from .gradient import GradientMatchingDistiller, MultiFormationDistiller, gradient_distance
from .trajectory import TrajectoryMatchingDistiller, default_expert_config, mtt_loss

METHODS = {
    "gradient-match": GradientMatchingDistiller,
    "distribution-match": DistributionMatchingDistiller,
    "trajectory-match": TrajectoryMatchingDistiller,
    "multi-formation-gradient-match": MultiFormationDistiller,
}


def make_distiller(method: str, **params) -> BaseDistiller:
    """Construct the engine for a method tag with keyword overrides."""
    if method not in METHODS:
        raise ValueError(f"unknown distillation method {method!r}; known: {sorted(METHODS)}")
    return METHODS[method](**params)


def distill_gradient_match(origin, **params):
    est = GradientMatchingDistiller(**params).fit(origin)
    return est.synthetic_, est.loss_history_


def distill_distribution_match(origin, **params):
    est = DistributionMatchingDistiller(**params).fit(origin)
    return est.synthetic_, est.loss_history_


def distill_trajectory_match(origin, buffers=None, **params):
    est = TrajectoryMatchingDistiller(**params).fit(origin, buffers=buffers)
    return est.synthetic_, est.loss_history_


__all__ = [
    "SYNTHETIC_SCHEMA_VERSION",
    "BaseDistiller",
    "DistributionMatchingDistiller",
    "FormationSpec",
    "GradientMatchingDistiller",
    "METHODS",
    "MultiFormationDistiller",
    "SyntheticDataset",
    "TrajectoryMatchingDistiller",
    "default_expert_config",
    "distill_distribution_match",
    "distill_gradient_match",
    "distill_trajectory_match",
    "formation_decode",
    "gradient_distance",
    "init_synthetic",
    "load_synthetic",
    "make_distiller",
    "mtt_loss",
    "save_synthetic",
]
