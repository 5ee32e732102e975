import json
import os

import numpy as np
import pytest
import torch
import yaml

from distillbench.harness import (
    ConfigError,
    ExperimentConfig,
    export_embeddings,
    load_config,
    run_experiment,
    save_config,
)
from distillbench.harness.cli import main
from distillbench.harness.pipeline import cross_architecture_eval, emit_report


def micro_config(tmp_path, **overrides):
    cfg = {
        "name": "micro",
        "seed": 0,
        "output_dir": str(tmp_path / "runs"),
        "dataset": {"name": "blobs-tiny", "root": "."},
        "distill": {"method": "distribution-match", "ipc": 1, "iterations": 3,
                    "batch_size": 16},
        "retrain": {"archs": ["convnet3"], "epochs": 5},
        "audits": {},
        "repeats": 2,
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = str(tmp_path / name)
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return path


# ---- config validation ----

def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    path = str(tmp_path / "cfg.yaml")
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_method(tmp_path):
    path = write_config(tmp_path, micro_config(tmp_path, distill={"method": "magic"}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rejects_unknown_distill_field(tmp_path):
    cfg = micro_config(tmp_path)
    cfg["distill"]["student_steps"] = 5  # trajectory-only field on distribution-match
    path = write_config(tmp_path, cfg)
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rejects_mia_without_split(tmp_path):
    cfg = micro_config(tmp_path, audits={"mia": True})
    path = write_config(tmp_path, cfg)
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rejects_unknown_top_level(tmp_path):
    cfg = micro_config(tmp_path)
    cfg["distilll"] = {}
    path = write_config(tmp_path, cfg)
    with pytest.raises(ConfigError):
        load_config(path)


# ---- pipeline ----

@pytest.fixture(scope="module")
def micro_report(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("exp")
    cfg_dict = micro_config(
        tmp_path,
        dataset={"name": "blobs-tiny", "root": ".",
                 "member_split": {"members_per_class": 30, "nonmembers_per_class": 30}},
        audits={"accuracy": True, "mia": True,
                "robustness": {"epsilons": [0.0, 1.0], "max_samples": 10},
                "fairness": True},
    )
    cfg = load_config(write_config(tmp_path, cfg_dict))
    out = str(tmp_path / "out")
    return cfg, run_experiment(cfg, out_dir=out), out


def test_run_experiment_report_contents(micro_report):
    cfg, report, out = micro_report
    assert "convnet3" in report.accuracy
    assert len(report.accuracy["convnet3"]["runs"]) == 2
    assert 0.0 <= report.mia["auc"] <= 1.0
    assert report.robustness["epsilons"] == [0.0, 1.0]
    assert len(report.fairness["per_class_accuracy"]) == 10
    assert os.path.exists(os.path.join(out, "report.json"))
    assert os.path.exists(os.path.join(out, "synthetic.json"))
    assert os.path.exists(os.path.join(out, "synthetic.bin"))


def test_run_experiment_reproducible(micro_report, tmp_path):
    cfg, report, _ = micro_report
    out2 = str(tmp_path / "rerun")
    report2 = run_experiment(cfg, out_dir=out2)
    a, b = report.to_dict(), report2.to_dict()
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_emit_report_views(micro_report, tmp_path):
    _, report, _ = micro_report
    out = str(tmp_path / "views")
    written = emit_report(report, out)
    names = {os.path.basename(p) for p in written}
    assert "report.json" in names
    assert "accuracy.csv" in names
    assert "mia.csv" in names
    assert "fairness.csv" in names
    assert any(n.endswith(".png") for n in names)
    for p in written:
        assert os.path.getsize(p) > 0


def test_audits_disabled_report_minimal(tmp_path):
    cfg_dict = micro_config(tmp_path)
    cfg = load_config(write_config(tmp_path, cfg_dict))
    report = run_experiment(cfg, out_dir=str(tmp_path / "out"))
    assert report.mia == {} and report.robustness == {} and report.fairness == {}
    assert report.accuracy


def test_cross_architecture_eval(tmp_path, blobs_tiny):
    from distillbench.distill import init_synthetic

    train, test = blobs_tiny
    cfg_dict = micro_config(tmp_path)
    cfg = load_config(write_config(tmp_path, cfg_dict))
    syn = init_synthetic(train, ipc=1, seed=0)
    table = cross_architecture_eval(syn, ["convnet3", "mlp"], cfg, test)
    assert set(table) == {"convnet3", "mlp"}
    for row in table.values():
        assert 0.0 <= row["mean"] <= 1.0
        assert len(row["runs"]) == cfg.repeats


def test_export_embeddings(tmp_path, blobs_tiny):
    from distillbench.distill import init_synthetic
    from distillbench.models import build_model

    train, _ = blobs_tiny
    model = build_model("convnet3", 10, train.image_shape, seed=0)
    model.set_normalization(train.mean, train.std)
    syn = init_synthetic(train, ipc=1, seed=0)
    real = train.subset(torch.arange(50))
    path = str(tmp_path / "emb.npz")
    projection, evr = export_embeddings(model, real, syn, path)
    data = np.load(path)
    assert data["embeddings"].shape == (60, model.embed_dim)
    assert sorted(set(data["tags"])) == ["real", "synthetic"]
    assert projection.shape == (60, 2)
    assert 0.0 < float(evr.sum()) <= 1.0 + 1e-6


def test_export_embeddings_isotropic_explained_variance():
    # principal-axes projection of centered isotropic data explains ~2/dim
    rng = np.random.default_rng(0)
    from sklearn.decomposition import PCA

    data = rng.normal(size=(4000, 40))
    evr = PCA(n_components=2).fit(data).explained_variance_ratio_
    assert float(evr.sum()) == pytest.approx(2 / 40, rel=0.25)


# ---- CLI ----

def test_cli_run_and_report(tmp_path, capsys):
    cfg_path = write_config(tmp_path, micro_config(tmp_path))
    out = str(tmp_path / "cli-out")
    assert main(["run", "-c", cfg_path, "-o", out]) == 0
    assert os.path.exists(os.path.join(out, "report.json"))
    assert main(["report", "-r", os.path.join(out, "report.json"),
                 "-o", str(tmp_path / "views")]) == 0


def test_cli_distill_then_train(tmp_path):
    cfg_path = write_config(tmp_path, micro_config(tmp_path))
    out = str(tmp_path / "cli-out")
    assert main(["distill", "-c", cfg_path, "-o", out]) == 0
    syn = os.path.join(out, "synthetic")
    assert main(["train", "-c", cfg_path, "-s", syn, "-o", out]) == 0
    assert main(["audit-accuracy", "-c", cfg_path, "-s", syn, "-o", out]) == 0
    assert main(["audit-robustness", "-c", cfg_path, "-m",
                 os.path.join(out, "model_convnet3"), "-o", out]) == 0
    assert main(["audit-fairness", "-c", cfg_path, "-m",
                 os.path.join(out, "model_convnet3"), "-o", out]) == 0


def test_cli_config_error_exit_code(tmp_path):
    cfg = micro_config(tmp_path, distill={"method": "nope"})
    cfg_path = write_config(tmp_path, cfg)
    assert main(["run", "-c", cfg_path]) == 1


def test_cli_missing_config_exit_code(tmp_path):
    assert main(["run", "-c", str(tmp_path / "absent.yaml")]) == 1


def test_cli_runtime_failure_exit_code(tmp_path):
    # valid config but the synthetic file is missing at runtime
    cfg_path = write_config(tmp_path, micro_config(tmp_path))
    assert main(["train", "-c", cfg_path, "-s", str(tmp_path / "missing")]) == 2


def test_cli_dataset_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DISTILLBENCH_DATA_ROOT", str(tmp_path))
    cfg = micro_config(tmp_path, dataset={"name": "cifar10-like"})
    cfg_path = write_config(tmp_path, cfg)
    # root override points at an empty dir: missing-files config error? no,
    # dataset file problems are runtime failures, not config errors
    assert main(["run", "-c", cfg_path]) == 2
