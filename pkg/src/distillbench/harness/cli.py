"""Command-line interface for the toolkit.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from ..datasets import UnknownDatasetError
from ..distill import formation_decode, load_synthetic, make_distiller, save_synthetic
from ..fairness import fairness_variance, normalized_accuracy
from ..models import evaluate, load_checkpoint, save_checkpoint
from ..privacy import MIAExperiment, run_mia, save_mia_result
from ..robustness import AttackConfig, robustness_curve, save_curve
from .config import ConfigError, load_config
from .pipeline import (
    AuditReport,
    _metric_vector,
    cross_architecture_eval,
    emit_report,
    prepare_origin,
    retrain_on,
    run_experiment,
)


def _add_common(parser):
    parser.add_argument("-c", "--config", required=True, help="experiment config (YAML)")
    parser.add_argument("-o", "--out", default=None, help="output directory")


def _out_dir(cfg, args):
    out = args.out or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_distill(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    origin, _, _ = prepare_origin(cfg)
    distiller = make_distiller(cfg.distill["method"], **cfg.distiller_params())
    distiller.fit(origin)
    save_synthetic(distiller.synthetic_, os.path.join(out, "synthetic"))
    print(f"distilled {cfg.distill['method']} ipc={distiller.synthetic_.ipc} -> {out}/synthetic")
    print(f"matching loss {distiller.loss_history_[0]:.4f} -> {distiller.loss_history_[-1]:.4f}")


def cmd_train(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    _, _, test = prepare_origin(cfg)
    synthetic = load_synthetic(args.synthetic)
    decoded = formation_decode(synthetic)
    arch = cfg.retrain.get("archs", ["convnet3"])[0]
    model, _ = retrain_on(decoded, arch, cfg, seed=cfg.seed)
    save_checkpoint(model, os.path.join(out, f"model_{arch}"), seed=cfg.seed)
    acc = evaluate(model, test).accuracy
    print(f"retrained {arch} on {synthetic.method} ipc={synthetic.ipc}: test accuracy {acc:.4f}")


def cmd_audit_accuracy(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    _, _, test = prepare_origin(cfg)
    synthetic = load_synthetic(args.synthetic)
    archs = cfg.retrain.get("archs", ["convnet3"])
    table = cross_architecture_eval(synthetic, archs, cfg, test)
    with open(os.path.join(out, "accuracy.json"), "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    for arch, row in table.items():
        print(f"{arch}: {row['mean']:.4f} +/- {row['std']:.4f}")


def cmd_audit_mia(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    origin, nonmembers, _ = prepare_origin(cfg)
    if nonmembers is None:
        raise ConfigError("mia audit requires dataset.member_split in the config")
    model = load_checkpoint(args.model)
    result = run_mia(MIAExperiment(
        model=model,
        members=origin,
        nonmembers=nonmembers,
        origin_per_class=cfg.dataset["member_split"]["members_per_class"],
        num_classes=origin.num_classes,
        method=cfg.distill.get("method", "none"),
        seed=cfg.seed,
    ))
    save_mia_result(result, os.path.join(out, "mia.json"))
    print(f"MIA AUC: {result.auc:.4f}")


def cmd_audit_robustness(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    _, _, test = prepare_origin(cfg)
    model = load_checkpoint(args.model)
    r = cfg.audits.get("robustness") or {}
    if not isinstance(r, dict):
        r = {}
    epsilons = r.get("epsilons", [0.0, 0.5, 1.0, 2.0, 4.0])
    attack = AttackConfig(
        max_iterations=r.get("max_iterations", 50), overshoot=r.get("overshoot", 0.02)
    )
    sample = test.subset(torch.arange(min(len(test), r.get("max_samples", 100))))
    curve = robustness_curve(model, sample, epsilons, attack)
    save_curve(curve, os.path.join(out, "robustness"))
    for e, a in zip(curve.epsilons, curve.accuracies):
        print(f"eps {e:g}: accuracy {a:.4f}")


def cmd_audit_fairness(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    origin, _, test = prepare_origin(cfg)
    model = load_checkpoint(args.model)
    distilled_v = _metric_vector(evaluate(model, test))
    ref_model, _ = retrain_on(origin, model.arch, cfg, seed=cfg.seed)
    reference_v = _metric_vector(evaluate(ref_model, test))
    ratios, permutation = normalized_accuracy(distilled_v, reference_v)
    block = {
        "accuracy_variance": fairness_variance(distilled_v, "accuracy"),
        "loss_variance": fairness_variance(distilled_v, "loss"),
        "normalized_accuracy": ratios.tolist(),
        "class_permutation": permutation.tolist(),
    }
    with open(os.path.join(out, "fairness.json"), "w") as f:
        json.dump(block, f, indent=2, sort_keys=True)
    print(f"loss variance: {block['loss_variance']:.6f}")
    print(f"accuracy variance: {block['accuracy_variance']:.6f}")


def cmd_run(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    report = run_experiment(cfg, out_dir=out)
    for arch, row in report.accuracy.items():
        print(f"{arch}: {row['mean']:.4f} +/- {row['std']:.4f}")
    print(f"report written to {out}/report.json")


def cmd_report(args):
    with open(args.report) as f:
        doc = json.load(f)
    report = AuditReport(
        config=doc["config"],
        accuracy=doc["accuracy"],
        baseline=doc["baseline"],
        mia=doc["mia"],
        robustness=doc["robustness"],
        fairness=doc["fairness"],
        distill_loss=doc["distill_loss"],
        timing=doc["timing"],
    )
    written = emit_report(report, args.out or os.path.dirname(args.report) or ".",
                          formats=tuple(args.formats.split(",")))
    for path in written:
        print(path)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="distillbench",
        description="Dataset distillation and security-audit toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="stage 1: synthesize a condensed dataset")
    _add_common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", help="stage 2: retrain a model on a synthetic dataset")
    _add_common(p)
    p.add_argument("-s", "--synthetic", required=True, help="synthetic dataset path prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit-accuracy", help="cross-architecture accuracy audit")
    _add_common(p)
    p.add_argument("-s", "--synthetic", required=True)
    p.set_defaults(func=cmd_audit_accuracy)

    p = sub.add_parser("audit-mia", help="membership-inference audit")
    _add_common(p)
    p.add_argument("-m", "--model", required=True, help="model checkpoint path prefix")
    p.set_defaults(func=cmd_audit_mia)

    p = sub.add_parser("audit-robustness", help="DeepFool robustness audit")
    _add_common(p)
    p.add_argument("-m", "--model", required=True)
    p.set_defaults(func=cmd_audit_robustness)

    p = sub.add_parser("audit-fairness", help="per-class fairness audit")
    _add_common(p)
    p.add_argument("-m", "--model", required=True)
    p.set_defaults(func=cmd_audit_fairness)

    p = sub.add_parser("run", help="full three-stage pipeline")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="regenerate derived views from a report")
    p.add_argument("-r", "--report", required=True, help="path to report.json")
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--formats", default="json,csv,plots")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        args.func(args)
    except (ConfigError, UnknownDatasetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
