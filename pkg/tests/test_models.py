import pytest
import torch
import torch.nn.functional as F

from distillbench.datasets import LabeledDataset
from distillbench.models import (
    TrainConfig,
    TrainingDivergedError,
    UnsupportedArchitectureError,
    build_model,
    evaluate,
    load_checkpoint,
    load_trajectory,
    record_trajectory,
    save_checkpoint,
    save_trajectory,
    train_classifier,
)


def small_ds(n=10, k=2, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 1, size, size, generator=g)
    labels = torch.arange(n) % k
    return LabeledDataset(images, labels, k, torch.zeros(1), torch.ones(1))


def test_build_deterministic():
    a = build_model("convnet3", 10, (3, 32, 32), seed=1)
    b = build_model("convnet3", 10, (3, 32, 32), seed=1)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_build_all_archs_forward():
    for arch in ("convnet3", "small-resnet", "small-vgg", "mlp"):
        model = build_model(arch, 4, (1, 16, 16), seed=0)
        out = model(torch.rand(3, 1, 16, 16))
        assert out.shape == (3, 4)
        assert torch.isfinite(out).all()
        emb = model.embed(torch.rand(2, 1, 16, 16))
        assert emb.shape == (2, model.embed_dim)


def test_mlp_two_logits():
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    assert model(torch.rand(1, 1, 8, 8)).shape == (1, 2)


def test_build_invalid():
    with pytest.raises(ValueError):
        build_model("convnet3", 0, (1, 16, 16), seed=0)
    with pytest.raises(UnsupportedArchitectureError):
        build_model("transformer", 10, (1, 16, 16), seed=0)
    with pytest.raises(UnsupportedArchitectureError):
        build_model("convnet3", 10, (1, 7, 7), seed=0)


def test_parameter_count_stable():
    a = build_model("convnet3", 10, (1, 16, 16), seed=1)
    b = build_model("convnet3", 10, (1, 16, 16), seed=99)
    assert a.parameter_count() == b.parameter_count()


def test_memorize_tiny_set():
    ds = small_ds(10)
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    model, history = train_classifier(
        model, ds, TrainConfig(epochs=200, lr=0.05, weight_decay=0.0, augment=False, seed=0)
    )
    assert len(history) == 200
    assert history[-1]["accuracy"] >= 0.99


def test_zero_epochs_identity():
    ds = small_ds(10)
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    before = [p.clone() for p in model.parameters()]
    model, history = train_classifier(model, ds, TrainConfig(epochs=0, seed=0))
    assert history == []
    for p, q in zip(model.parameters(), before):
        assert torch.equal(p, q)


def test_label_out_of_range():
    ds = small_ds(10, k=2)
    model = build_model("mlp", 1, (1, 8, 8), seed=0)
    with pytest.raises(ValueError):
        train_classifier(model, ds, TrainConfig(epochs=1, seed=0))


def test_divergence_reported():
    ds = small_ds(10)
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    with pytest.raises(TrainingDivergedError):
        train_classifier(
            model, ds, TrainConfig(epochs=50, lr=1e4, augment=False, seed=0)
        )


def test_evaluate_forced_predictions():
    ds = small_ds(20, k=2)
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([10.0, -10.0]))
    result = evaluate(model, ds)
    assert result.accuracy == pytest.approx(0.5)
    assert result.per_class_accuracy.tolist() == [1.0, 0.0]


def test_evaluate_weighted_mean(blobs_tiny):
    train, _ = blobs_tiny
    model = build_model("convnet3", 10, train.image_shape, seed=0)
    result = evaluate(model, train)
    counts = train.class_counts().float()
    weighted = float((result.per_class_accuracy * counts).sum() / counts.sum())
    assert result.accuracy == pytest.approx(weighted, abs=1e-7)


def test_evaluate_empty():
    ds = small_ds(10).subset(torch.tensor([], dtype=torch.long))
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    with pytest.raises(ValueError):
        evaluate(model, ds)


def test_gradient_finite_differences():
    # per-layer gradients of the training loss on a tiny mlp vs central differences
    ds = small_ds(6)
    model = build_model("mlp", 2, (1, 8, 8), seed=3)

    def loss_value():
        return F.cross_entropy(model(ds.images), ds.labels)

    grads = model.loss_gradients(loss_value())
    eps = 1e-3
    for p, grad in zip(model.parameters(), grads):
        flat = p.data.view(-1)
        for j in [0, flat.numel() // 2]:
            orig = float(flat[j])
            with torch.no_grad():
                flat[j] = orig + eps
                hi = float(loss_value())
                flat[j] = orig - eps
                lo = float(loss_value())
                flat[j] = orig
            fd = (hi - lo) / (2 * eps)
            g = float(grad.view(-1)[j])
            assert g == pytest.approx(fd, rel=1e-3, abs=1e-5)


def test_record_trajectory_counts():
    ds = small_ds(12)
    cfg = TrainConfig(epochs=10, lr=0.05, momentum=0.0, augment=False, seed=0)
    buf = record_trajectory("mlp", ds, cfg, snapshot_every=5)
    assert buf.epochs == [0, 5, 10]
    assert len(buf) == 3


def test_record_trajectory_deterministic():
    ds = small_ds(12)
    cfg = TrainConfig(epochs=4, lr=0.05, momentum=0.0, augment=False, seed=7)
    a = record_trajectory("mlp", ds, cfg, snapshot_every=2)
    b = record_trajectory("mlp", ds, cfg, snapshot_every=2)
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        for p, q in zip(ca, cb):
            assert torch.equal(p, q)


def test_record_trajectory_bad_interval():
    ds = small_ds(12)
    with pytest.raises(ValueError):
        record_trajectory("mlp", ds, TrainConfig(epochs=4, seed=0), snapshot_every=0)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model("convnet3", 10, (1, 16, 16), seed=2)
    model.set_normalization(torch.tensor([0.4]), torch.tensor([0.2]))
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path, epoch=3, seed=2)
    loaded = load_checkpoint(path)
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(p, q)
    assert torch.equal(loaded.input_mean, model.input_mean)


def test_checkpoint_blob_little_endian(tmp_path):
    import numpy as np

    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path)
    blob = open(path + ".bin", "rb").read()
    first = np.frombuffer(blob, dtype="<f4", count=4)
    expected = next(model.parameters()).detach().view(-1)[:4].numpy()
    assert np.array_equal(first, expected)


def test_trajectory_roundtrip(tmp_path):
    ds = small_ds(12)
    cfg = TrainConfig(epochs=4, lr=0.05, momentum=0.0, augment=False, seed=0)
    buf = record_trajectory("mlp", ds, cfg, snapshot_every=2)
    save_trajectory(buf, str(tmp_path / "traj"))
    loaded = load_trajectory(str(tmp_path / "traj"))
    assert loaded.epochs == buf.epochs
    for ca, cb in zip(buf.checkpoints, loaded.checkpoints):
        for p, q in zip(ca, cb):
            assert torch.equal(p, q)
