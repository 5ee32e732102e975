"""Minimal-perturbation attack (DeepFool) and adversarial-accuracy curves.

Perturbation norms are L2, measured in normalized input space (the space the
model actually sees), so epsilons are comparable across datasets.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import torch

ROBUSTNESS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = 50
    overshoot: float = 0.02
    num_candidates: int = 10      # cap on candidate classes per sample

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.overshoot < 0:
            raise ValueError("overshoot must be non-negative")


@dataclass
class DeepFoolResult:
    perturbation: torch.Tensor    # in normalized input space
    found: bool
    iterations: int


@dataclass
class RobustnessCurve:
    epsilons: list
    accuracies: list
    norms: torch.Tensor           # per-sample minimal L2 norms (inf = never flipped)
    correct: torch.Tensor         # clean-correctness flags
    descriptor: dict = field(default_factory=dict)

    @property
    def never_flipped(self):
        return int((torch.isinf(self.norms) & self.correct).sum())


def _normalized_forward(model, z):
    """Forward pass taking inputs already in normalized space."""
    return model.head(model.features(z))


def deepfool(model, x, y, cfg=AttackConfig()) -> DeepFoolResult:
    """Iterative linearization toward the nearest decision boundary.

    Works in normalized input space; returns the accumulated perturbation
    scaled by (1 + overshoot).  If `x` is already misclassified the zero
    perturbation is returned immediately.
    """
    model.eval()
    y = int(y)
    z0 = ((x - model.input_mean.view(-1, 1, 1)) / model.input_std.view(-1, 1, 1)).unsqueeze(0)
    with torch.no_grad():
        logits = _normalized_forward(model, z0)[0]
    if not torch.isfinite(logits).all():
        raise RuntimeError("non-finite activations during attack")
    if int(logits.argmax()) != y:
        return DeepFoolResult(torch.zeros_like(z0[0]), found=True, iterations=0)
    candidates = logits.argsort(descending=True)[: cfg.num_candidates + 1]
    candidates = [int(c) for c in candidates if int(c) != y][: cfg.num_candidates]

    r_total = torch.zeros_like(z0)
    for iteration in range(1, cfg.max_iterations + 1):
        z = (z0 + r_total).clone().requires_grad_(True)
        logits = _normalized_forward(model, z)[0]
        grad_y = torch.autograd.grad(logits[y], z, retain_graph=True)[0]
        best_dist, best_step = math.inf, None
        for k in candidates:
            grad_k = torch.autograd.grad(logits[k], z, retain_graph=True)[0]
            w = grad_k - grad_y
            f = float((logits[k] - logits[y]).detach())
            w_norm = float(w.norm())
            if w_norm < 1e-12:
                continue
            dist = abs(f) / w_norm
            if dist < best_dist:
                best_dist, best_step = dist, (abs(f) / w_norm**2) * w
        if best_step is None:
            break
        r_total = r_total + best_step
        with torch.no_grad():
            pred = int(_normalized_forward(model, z0 + (1 + cfg.overshoot) * r_total)[0].argmax())
        if pred != y:
            return DeepFoolResult(
                ((1 + cfg.overshoot) * r_total)[0], found=True, iterations=iteration
            )
    return DeepFoolResult(((1 + cfg.overshoot) * r_total)[0], found=False,
                          iterations=cfg.max_iterations)


def minimal_norms(model, ds, cfg=AttackConfig()):
    """Per-sample minimal perturbation L2 norms plus clean-correctness flags.

    Misclassified samples get norm 0; samples the attack never flips get
    norm inf (treated as robust at every epsilon, with the count reported).
    """
    model.eval()
    with torch.no_grad():
        preds = model(ds.images).argmax(1)
    correct = preds == ds.labels
    norms = torch.zeros(len(ds))
    for i in range(len(ds)):
        if not correct[i]:
            continue
        result = deepfool(model, ds.images[i], ds.labels[i], cfg)
        norms[i] = float(result.perturbation.norm()) if result.found else math.inf
    return norms, correct


def adversarial_accuracy(norms, correct, epsilon):
    """Fraction of samples correctly classified and robust beyond epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return float(correct.float().mean())
    return float((correct & (norms > epsilon)).float().mean())


def robustness_curve(model, ds, epsilons, cfg=AttackConfig(), descriptor=None) -> RobustnessCurve:
    norms, correct = minimal_norms(model, ds, cfg)
    accuracies = [adversarial_accuracy(norms, correct, float(e)) for e in epsilons]
    return RobustnessCurve(
        epsilons=[float(e) for e in epsilons],
        accuracies=accuracies,
        norms=norms,
        correct=correct,
        descriptor=descriptor or {},
    )


def save_curve(curve: RobustnessCurve, path_prefix):
    """Persist as JSON + CSV table + plot image."""
    finite = curve.norms[torch.isfinite(curve.norms) & curve.correct]
    hist_edges = [i / 10 for i in range(0, 21)]
    hist = torch.histogram(finite, bins=torch.tensor(hist_edges)).hist if len(finite) else torch.zeros(20)
    doc = {
        "schema_version": ROBUSTNESS_SCHEMA_VERSION,
        "descriptor": curve.descriptor,
        "epsilons": curve.epsilons,
        "accuracies": curve.accuracies,
        "never_flipped": curve.never_flipped,
        "norm_histogram": {"edges": hist_edges, "counts": hist.tolist()},
    }
    with open(path_prefix + ".json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    with open(path_prefix + ".csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epsilon", "accuracy"])
        for e, a in zip(curve.epsilons, curve.accuracies):
            writer.writerow([e, a])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.epsilons, curve.accuracies, marker="o")
    ax.set_xlabel("epsilon (L2, normalized space)")
    ax.set_ylabel("adversarial accuracy")
    ax.set_ylim(0, 1)
    title = curve.descriptor.get("label", "robustness curve")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path_prefix + ".png")
    plt.close(fig)
