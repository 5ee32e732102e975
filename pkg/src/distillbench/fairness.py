"""Class-wise fairness metrics: variance of per-class accuracy or loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ClassMetricVector:
    """Per-class accuracy and mean-loss vectors for one model/dataset pair."""

    accuracy: torch.Tensor
    loss: torch.Tensor
    order: str = "natural"        # natural | sorted-by-reference

    def __post_init__(self):
        if len(self.accuracy) != len(self.loss):
            raise ValueError("accuracy and loss vectors differ in length")
        if len(self.accuracy) == 0:
            raise ValueError("empty metric vector")
        if ((self.accuracy < 0) | (self.accuracy > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        if (self.loss < 0).any():
            raise ValueError("losses must be non-negative")

    @property
    def num_classes(self):
        return len(self.accuracy)

    def metric(self, name):
        if name not in ("accuracy", "loss"):
            raise ValueError(f"unknown metric {name!r}")
        return getattr(self, name)


def fairness_variance(v: ClassMetricVector, metric="loss"):
    """Population variance of the chosen per-class metric."""
    values = v.metric(metric)
    return float(values.var(unbiased=False))


def compare_fairness(va: ClassMetricVector, vb: ClassMetricVector, metric="loss"):
    """'A fairer' | 'B fairer' | 'tie' by strictly smaller variance."""
    if va.num_classes != vb.num_classes:
        raise ValueError("metric vectors have mismatched class counts")
    a, b = fairness_variance(va, metric), fairness_variance(vb, metric)
    if abs(a - b) <= TIE_TOLERANCE:
        return "tie"
    return "A fairer" if a < b else "B fairer"


def normalized_accuracy(distilled: ClassMetricVector, reference: ClassMetricVector):
    """Per-class distilled/reference accuracy ratios in reference-sorted order.

    Returns (ratios, permutation): classes are reordered from highest to
    lowest reference accuracy, and `permutation[i]` names the original class
    at sorted position i.
    """
    if distilled.num_classes != reference.num_classes:
        raise ValueError("metric vectors have mismatched class counts")
    if (reference.accuracy <= 0).any():
        raise ValueError("reference accuracy is zero for some class")
    permutation = torch.argsort(reference.accuracy, descending=True, stable=True)
    ratios = distilled.accuracy[permutation] / reference.accuracy[permutation]
    return ratios, permutation
