"""Membership-inference audit of models trained on distilled data.

The attack is score-based: each sample is scored by the negative per-sample
cross-entropy of the target model, and the AUC measures how well that score
separates distillation-origin members from held-out non-members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset

MIA_SCHEMA_VERSION = 1


@dataclass
class MIAExperiment:
    model: object                  # frozen trained Classifier
    members: LabeledDataset        # the distillation origin
    nonmembers: LabeledDataset     # held-out samples of the same classes
    origin_per_class: int = 0
    init: str = "real"
    num_classes: int = 0
    method: str = "none"
    seed: int = 0


@dataclass
class MIAResult:
    auc: float
    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    descriptor: dict = field(default_factory=dict)


@torch.no_grad()
def mia_score(model, x, y):
    """Per-sample membership score: negative cross-entropy (higher = more
    member-like).  Accepts a single sample or a batch."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
        y = torch.tensor([int(y)])
    if int(y.max()) >= model.num_classes or int(y.min()) < 0:
        raise ValueError("label out of range for the model's class count")
    model.eval()
    scores = -F.cross_entropy(model(x), y, reduction="none")
    return float(scores[0]) if single else scores


def compute_auc(member_scores, nonmember_scores):
    """Probability that a random member outranks a random non-member,
    ties counted one half (the Mann-Whitney rank statistic)."""
    ms = np.asarray(member_scores, dtype=np.float64)
    ns = np.asarray(nonmember_scores, dtype=np.float64)
    if ms.size == 0 or ns.size == 0:
        raise ValueError("both score sets must be nonempty")
    combined = np.concatenate([ms, ns])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty_like(combined)
    ranks[order] = np.arange(1, combined.size + 1)
    # average ranks over tied values
    for value in np.unique(combined):
        tied = combined == value
        if tied.sum() > 1:
            ranks[tied] = ranks[tied].mean()
    u = ranks[: ms.size].sum() - ms.size * (ms.size + 1) / 2
    return float(u / (ms.size * ns.size))


def run_mia(exp: MIAExperiment) -> MIAResult:
    """Score both pools and return the AUC with the full experiment record."""
    member_scores = mia_score(exp.model, exp.members.images, exp.members.labels).numpy()
    nonmember_scores = mia_score(exp.model, exp.nonmembers.images, exp.nonmembers.labels).numpy()
    descriptor = {
        "origin_per_class": exp.origin_per_class,
        "init": exp.init,
        "num_classes": exp.num_classes or exp.members.num_classes,
        "method": exp.method,
        "seed": exp.seed,
        "member_count": len(exp.members),
        "nonmember_count": len(exp.nonmembers),
        "nonmember_source": "held-out train split",
    }
    return MIAResult(
        auc=compute_auc(member_scores, nonmember_scores),
        member_scores=member_scores,
        nonmember_scores=nonmember_scores,
        descriptor=descriptor,
    )


def save_mia_result(result: MIAResult, path):
    doc = {
        "schema_version": MIA_SCHEMA_VERSION,
        "auc": result.auc,
        "config": result.descriptor,
        "scores": [
            {"score": float(s), "member": True} for s in result.member_scores
        ] + [
            {"score": float(s), "member": False} for s in result.nonmember_scores
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def load_mia_result(path) -> MIAResult:
    with open(path) as f:
        doc = json.load(f)
    ms = np.array([s["score"] for s in doc["scores"] if s["member"]])
    ns = np.array([s["score"] for s in doc["scores"] if not s["member"]])
    result = MIAResult(
        auc=doc["auc"], member_scores=ms, nonmember_scores=ns, descriptor=doc["config"]
    )
    if abs(compute_auc(ms, ns) - result.auc) > 1e-9:
        raise ValueError(f"stored AUC does not match stored scores in {path}")
    return result
