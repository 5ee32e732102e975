"""Three-stage experiment pipeline: distill, retrain from scratch, audit."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ..datasets import (
    SplitSpec,
    load_dataset,
    member_split,
    restrict_classes,
    subsample_per_class,
)
from ..distill import formation_decode, make_distiller, save_synthetic
from ..fairness import ClassMetricVector, fairness_variance, normalized_accuracy
from ..models import TrainConfig, build_model, evaluate, save_checkpoint, train_classifier
from ..privacy import MIAExperiment, run_mia, save_mia_result
from ..robustness import AttackConfig, robustness_curve, save_curve
from .config import ExperimentConfig

REPORT_SCHEMA_VERSION = 1


@dataclass
class AuditReport:
    """Canonical per-experiment record; all derived views regenerate from it."""

    config: dict
    accuracy: dict = field(default_factory=dict)      # arch -> {mean, std, runs}
    baseline: dict = field(default_factory=dict)
    mia: dict = field(default_factory=dict)
    robustness: dict = field(default_factory=dict)
    fairness: dict = field(default_factory=dict)
    distill_loss: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config,
            "accuracy": self.accuracy,
            "baseline": self.baseline,
            "mia": self.mia,
            "robustness": self.robustness,
            "fairness": self.fairness,
            "distill_loss": self.distill_loss,
            "timing": self.timing,
        }


def prepare_origin(cfg: ExperimentConfig):
    """Load the dataset and derive (origin, nonmembers, test) per config."""
    train, test = load_dataset(cfg.dataset["name"], cfg.data_root())
    if "restrict_classes" in cfg.dataset:
        k = cfg.dataset["restrict_classes"]
        train = restrict_classes(train, k, cfg.seed)
        test = restrict_classes(test, k, cfg.seed)
    nonmembers = None
    if "member_split" in cfg.dataset:
        s = cfg.dataset["member_split"]
        spec = SplitSpec(
            members_per_class=s["members_per_class"],
            nonmembers_per_class=s.get("nonmembers_per_class", s["members_per_class"]),
            seed=s.get("seed", cfg.seed),
        )
        origin, nonmembers = member_split(train, spec)
    elif "subsample_per_class" in cfg.dataset:
        origin = subsample_per_class(train, cfg.dataset["subsample_per_class"], cfg.seed)
    else:
        origin = train
    return origin, nonmembers, test


def _train_config(cfg: ExperimentConfig, seed):
    r = cfg.retrain
    return TrainConfig(
        epochs=r.get("epochs", 120),
        batch_size=r.get("batch_size", 64),
        lr=r.get("lr", 0.01),
        lr_schedule=r.get("lr_schedule", "constant"),
        momentum=r.get("momentum", 0.9),
        weight_decay=r.get("weight_decay", 5e-4),
        augment=r.get("augment", True),
        seed=seed,
    )


def retrain_on(decoded, arch, cfg: ExperimentConfig, seed):
    """Stage-2 retraining: always a fresh model, never a distillation-time one."""
    model = build_model(arch, decoded.num_classes, decoded.image_shape, seed=seed + 500)
    model, history = train_classifier(model, decoded, _train_config(cfg, seed))
    return model, history


def cross_architecture_eval(synthetic, archs, cfg: ExperimentConfig, test):
    """Per-architecture accuracy of models trained from scratch on S."""
    decoded = formation_decode(synthetic)
    table = {}
    for arch in archs:
        runs = []
        for r in range(cfg.repeats):
            model, _ = retrain_on(decoded, arch, cfg, seed=cfg.seed + r)
            runs.append(evaluate(model, test).accuracy)
        table[arch] = {
            "mean": float(np.mean(runs)),
            "std": float(np.std(runs)),
            "runs": runs,
        }
    return table


def export_embeddings(model, real, synthetic, path):
    """Penultimate-layer embeddings of real and synthetic samples plus a
    2-axis principal-component projection with explained variance."""
    from sklearn.decomposition import PCA

    decoded = formation_decode(synthetic)
    if len(real) == 0 or len(decoded) == 0:
        raise ValueError("empty inputs for embedding export")
    with torch.no_grad():
        emb_real = model.embed(real.images).numpy()
        emb_syn = model.embed(decoded.images).numpy()
    vectors = np.concatenate([emb_real, emb_syn])
    tags = np.array(["real"] * len(emb_real) + ["synthetic"] * len(emb_syn))
    classes = np.concatenate([real.labels.numpy(), decoded.labels.numpy()])
    pca = PCA(n_components=2)
    projection = pca.fit_transform(vectors)
    np.savez(
        path,
        embeddings=vectors,
        tags=tags,
        classes=classes,
        projection=projection,
        explained_variance_ratio=pca.explained_variance_ratio_,
    )
    return projection, pca.explained_variance_ratio_


def _metric_vector(result):
    return ClassMetricVector(accuracy=result.per_class_accuracy, loss=result.per_class_loss)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> AuditReport:
    """Distill, retrain each configured architecture from scratch, audit."""
    cfg.validate()
    t_start = time.time()
    out_dir = out_dir or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    origin, nonmembers, test = prepare_origin(cfg)

    # stage 1: distill
    distiller = make_distiller(cfg.distill["method"], **cfg.distiller_params())
    distiller.fit(origin)
    synthetic = distiller.synthetic_
    save_synthetic(synthetic, os.path.join(out_dir, "synthetic"))
    report = AuditReport(config=cfg.to_dict())
    report.distill_loss = {
        "initial": distiller.loss_history_[0],
        "final": distiller.loss_history_[-1],
        "steps": len(distiller.loss_history_),
    }

    # stage 2: retrain from scratch per architecture
    archs = cfg.retrain.get("archs", ["convnet3"])
    decoded = formation_decode(synthetic)
    models = {}
    for arch in archs:
        runs, histories = [], []
        for r in range(cfg.repeats):
            model, history = retrain_on(decoded, arch, cfg, seed=cfg.seed + r)
            runs.append(evaluate(model, test).accuracy)
            histories.append(history)
            if r == 0:
                models[arch] = model
                save_checkpoint(model, os.path.join(out_dir, f"model_{arch}"), seed=cfg.seed)
        report.accuracy[arch] = {
            "mean": float(np.mean(runs)),
            "std": float(np.std(runs)),
            "runs": runs,
        }
    audit_arch = archs[0]
    audit_model = models[audit_arch]

    # stage 3: audits on retrained models only
    audits = cfg.audits
    if "accuracy" in audits and audits["accuracy"]:
        baseline_runs = []
        for r in range(cfg.repeats):
            sub = subsample_per_class(origin, min(synthetic.ipc, int(origin.class_counts().min())),
                                      seed=cfg.seed + r)
            model, _ = retrain_on(sub, audit_arch, cfg, seed=cfg.seed + r)
            baseline_runs.append(evaluate(model, test).accuracy)
        report.baseline = {
            "kind": "random-real-subset",
            "per_class": min(synthetic.ipc, int(origin.class_counts().min())),
            "mean": float(np.mean(baseline_runs)),
            "std": float(np.std(baseline_runs)),
            "runs": baseline_runs,
        }
    if "mia" in audits and audits["mia"]:
        if nonmembers is None:
            raise ValueError("mia audit requires dataset.member_split")
        result = run_mia(MIAExperiment(
            model=audit_model,
            members=origin,
            nonmembers=nonmembers,
            origin_per_class=cfg.dataset["member_split"]["members_per_class"],
            init=synthetic.init,
            num_classes=origin.num_classes,
            method=synthetic.method,
            seed=cfg.seed,
        ))
        save_mia_result(result, os.path.join(out_dir, "mia.json"))
        report.mia = {"auc": result.auc, "descriptor": result.descriptor}
    if "robustness" in audits and audits["robustness"]:
        r = audits["robustness"] if isinstance(audits["robustness"], dict) else {}
        epsilons = r.get("epsilons", [0.0, 0.5, 1.0, 2.0, 4.0])
        attack = AttackConfig(
            max_iterations=r.get("max_iterations", 50),
            overshoot=r.get("overshoot", 0.02),
        )
        sample = test.subset(torch.arange(min(len(test), r.get("max_samples", 100))))
        curve = robustness_curve(
            audit_model, sample, epsilons, attack,
            descriptor={"label": f"{synthetic.method} ipc={synthetic.ipc}"},
        )
        save_curve(curve, os.path.join(out_dir, "robustness"))
        report.robustness = {
            "epsilons": curve.epsilons,
            "accuracies": curve.accuracies,
            "never_flipped": curve.never_flipped,
        }
    if "fairness" in audits and audits["fairness"]:
        distilled_v = _metric_vector(evaluate(audit_model, test))
        ref_model, _ = retrain_on(origin, audit_arch, cfg, seed=cfg.seed)
        reference_v = _metric_vector(evaluate(ref_model, test))
        ratios, permutation = normalized_accuracy(distilled_v, reference_v)
        report.fairness = {
            "per_class_accuracy": distilled_v.accuracy.tolist(),
            "per_class_loss": distilled_v.loss.tolist(),
            "accuracy_variance": fairness_variance(distilled_v, "accuracy"),
            "loss_variance": fairness_variance(distilled_v, "loss"),
            "reference_accuracy": reference_v.accuracy.tolist(),
            "normalized_accuracy": ratios.tolist(),
            "class_permutation": permutation.tolist(),
        }

    report.timing = {"wall_clock_seconds": time.time() - t_start}
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return report


def emit_report(report: AuditReport, out_dir, formats=("json", "csv", "plots")):
    """Derived views of the canonical report: JSON, CSV tables, plots."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    doc = report.to_dict()
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
        written.append(path)
    if "csv" in formats:
        import csv

        path = os.path.join(out_dir, "accuracy.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["arch", "mean", "std"])
            for arch, row in doc["accuracy"].items():
                w.writerow([arch, row["mean"], row["std"]])
        written.append(path)
        if doc["mia"]:
            path = os.path.join(out_dir, "mia.csv")
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["method", "origin_per_class", "num_classes", "auc"])
                d = doc["mia"]["descriptor"]
                w.writerow([d["method"], d["origin_per_class"], d["num_classes"],
                            doc["mia"]["auc"]])
            written.append(path)
        if doc["fairness"]:
            path = os.path.join(out_dir, "fairness.csv")
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["class", "accuracy", "loss", "normalized_accuracy_sorted"])
                fb = doc["fairness"]
                for i, (a, l, n) in enumerate(zip(
                    fb["per_class_accuracy"], fb["per_class_loss"], fb["normalized_accuracy"]
                )):
                    w.writerow([i, a, l, n])
            written.append(path)
    if "plots" in formats:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        if doc["robustness"]:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(doc["robustness"]["epsilons"], doc["robustness"]["accuracies"], marker="o")
            ax.set_xlabel("epsilon")
            ax.set_ylabel("adversarial accuracy")
            fig.tight_layout()
            path = os.path.join(out_dir, "robustness.png")
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
        if doc["fairness"]:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.bar(range(len(doc["fairness"]["normalized_accuracy"])),
                   doc["fairness"]["normalized_accuracy"])
            ax.set_xlabel("class (sorted by reference accuracy)")
            ax.set_ylabel("normalized accuracy")
            fig.tight_layout()
            path = os.path.join(out_dir, "fairness.png")
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
        if doc["accuracy"]:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            archs = list(doc["accuracy"])
            means = [doc["accuracy"][a]["mean"] for a in archs]
            stds = [doc["accuracy"][a]["std"] for a in archs]
            ax.bar(archs, means, yerr=stds)
            ax.set_ylabel("test accuracy")
            fig.tight_layout()
            path = os.path.join(out_dir, "accuracy.png")
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written
