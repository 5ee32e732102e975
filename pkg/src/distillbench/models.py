"""Classifier zoo, training, evaluation, and expert-trajectory recording.

Models consume raw [0, 1] pixels; per-channel normalization is applied as
the first step of the forward pass so stored images remain renderable while
all optimization happens in normalized input space.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import LabeledDataset

ARCHITECTURES = ("convnet3", "small-resnet", "small-vgg", "mlp")

CHECKPOINT_SCHEMA_VERSION = 1


class UnsupportedArchitectureError(ValueError):
    """Architecture id unknown or incompatible with the input shape."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr: float = 0.01
    lr_schedule: str = "constant"      # constant | cosine
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("hyperparameters must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class _ResidualBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(cout, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class Classifier(nn.Module):
    """Architecture id plus parameter state with forward and embedding views.

    `features` maps normalized images to the penultimate feature vector;
    `head` is the final linear layer producing K logits.
    """

    def __init__(self, arch, num_classes, input_shape, features, head):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.features = features
        self.head = head
        c = input_shape[0]
        self.register_buffer("input_mean", torch.zeros(c))
        self.register_buffer("input_std", torch.ones(c))

    def set_normalization(self, mean, std):
        self.input_mean.copy_(mean)
        self.input_std.copy_(std)

    def _norm(self, x):
        return (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)

    def embed(self, x):
        """Penultimate-layer feature vectors."""
        return self.features(self._norm(x))

    def forward(self, x):
        return self.head(self.embed(x))

    @property
    def embed_dim(self):
        return self.head.in_features

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def loss_gradients(self, loss, create_graph=False):
        """Per-layer gradients of a scalar loss, in parameter order."""
        return torch.autograd.grad(loss, list(self.parameters()), create_graph=create_graph)

    def params_digest(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.detach().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _check_shape(arch, input_shape):
    c, h, w = input_shape
    if arch == "mlp":
        return
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise UnsupportedArchitectureError(
            f"{arch} needs height/width divisible by 8, got {input_shape}"
        )


def build_model(arch, num_classes, input_shape, seed, width=64) -> Classifier:
    """Deterministically initialized classifier for the given shape."""
    if arch not in ARCHITECTURES:
        raise UnsupportedArchitectureError(f"unknown architecture {arch!r}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if len(input_shape) != 3:
        raise UnsupportedArchitectureError(f"input_shape must be (C, H, W), got {input_shape}")
    _check_shape(arch, input_shape)
    c, h, w = input_shape
    torch.manual_seed(seed)

    if arch == "convnet3":
        layers, cin = [], c
        for _ in range(3):
            layers += [
                nn.Conv2d(cin, width, 3, padding=1),
                nn.GroupNorm(width, width),
                nn.ReLU(),
                nn.AvgPool2d(2),
            ]
            cin = width
        features = nn.Sequential(*layers, nn.Flatten())
        head = nn.Linear(width * (h // 8) * (w // 8), num_classes)
    elif arch == "small-resnet":
        features = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1),
            nn.GroupNorm(width, width),
            nn.ReLU(),
            nn.AvgPool2d(2),
            _ResidualBlock(width, width),
            nn.AvgPool2d(2),
            _ResidualBlock(width, width),
            nn.AvgPool2d(2),
            nn.Flatten(),
        )
        head = nn.Linear(width * (h // 8) * (w // 8), num_classes)
    elif arch == "small-vgg":
        features = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
        )
        head = nn.Linear(width * (h // 8) * (w // 8), num_classes)
    else:  # mlp
        hidden = 128
        features = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c * h * w, hidden),
            nn.ReLU(),
        )
        head = nn.Linear(hidden, num_classes)

    return Classifier(arch, num_classes, input_shape, features, head)


def _epoch_lr(cfg, epoch):
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1 + np.cos(np.pi * epoch / max(cfg.epochs, 1)))
    return cfg.lr


def train_classifier(model, ds, cfg, policy=None, snapshot_hook=None):
    """SGD training on a LabeledDataset; returns (model, per-epoch history).

    With `cfg.augment`, one randomly chosen differentiable augmentation op is
    applied per batch.  `snapshot_hook(epoch)` fires after every epoch (and
    once at epoch 0 before training) so callers can record trajectories.
    """
    from .augment import AugmentationPolicy, apply, sample_omega

    if len(ds) and int(ds.labels.max()) >= model.num_classes:
        raise ValueError(
            f"label {int(ds.labels.max())} out of range for K={model.num_classes}"
        )
    model.set_normalization(ds.mean, ds.std)
    if policy is None:
        policy = AugmentationPolicy.training_default()
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    if snapshot_hook is not None:
        snapshot_hook(0)
    history = []
    n = len(ds)
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = _epoch_lr(cfg, epoch)
        model.train()
        perm = torch.randperm(n, generator=g)
        total_loss, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            x, y = ds.images[idx], ds.labels[idx]
            if cfg.augment:
                x = apply(x, sample_omega(policy, int(torch.randint(0, 2**31, (1,), generator=g))))
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y).sum())
        history.append({"epoch": epoch + 1, "loss": total_loss / n, "accuracy": correct / n})
        if snapshot_hook is not None:
            snapshot_hook(epoch + 1)
    model.eval()
    return model, history


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: torch.Tensor
    per_class_loss: torch.Tensor


@torch.no_grad()
def evaluate(model, ds, batch_size=256) -> EvalResult:
    """Overall accuracy plus per-class accuracy and mean-loss vectors.

    Overall accuracy is exactly the class-size-weighted mean of the
    per-class accuracies (both are computed from the same counts).
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    k = ds.num_classes
    correct = torch.zeros(k)
    loss_sum = torch.zeros(k)
    count = torch.zeros(k)
    for i in range(0, len(ds), batch_size):
        x, y = ds.images[i : i + batch_size], ds.labels[i : i + batch_size]
        logits = model(x)
        losses = F.cross_entropy(logits, y, reduction="none")
        hit = (logits.argmax(1) == y).float()
        correct.index_add_(0, y, hit)
        loss_sum.index_add_(0, y, losses)
        count.index_add_(0, y, torch.ones_like(losses))
    present = count.clamp_min(1)
    return EvalResult(
        accuracy=float(correct.sum() / count.sum()),
        per_class_accuracy=correct / present,
        per_class_loss=loss_sum / present,
    )


@dataclass
class TrajectoryBuffer:
    """Ordered expert checkpoints recorded while training on real data."""

    arch: str
    num_classes: int
    input_shape: tuple
    source_digest: str
    epochs: list = field(default_factory=list)          # strictly increasing tags
    checkpoints: list = field(default_factory=list)     # parallel list of param lists
    normalization: tuple = (None, None)

    def __len__(self):
        return len(self.checkpoints)

    def add(self, epoch, params):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("epoch tags must be strictly increasing")
        if self.checkpoints and sum(p.numel() for p in params) != sum(
            p.numel() for p in self.checkpoints[0]
        ):
            raise ValueError("checkpoint parameter count mismatch")
        self.epochs.append(epoch)
        self.checkpoints.append([p.detach().clone() for p in params])

    def make_model(self, index=None, seed=0):
        """Fresh Classifier, loaded from checkpoint `index` when given."""
        model = build_model(self.arch, self.num_classes, self.input_shape, seed)
        if self.normalization[0] is not None:
            model.set_normalization(*self.normalization)
        if index is not None:
            with torch.no_grad():
                for p, q in zip(model.parameters(), self.checkpoints[index]):
                    p.copy_(q)
        return model


def record_trajectory(arch, ds, cfg, snapshot_every=1) -> TrajectoryBuffer:
    """Train an expert on real data, snapshotting every `snapshot_every` epochs.

    The buffer includes the initialization, giving floor(epochs/snapshot_every)+1
    checkpoints.
    """
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be a positive epoch count")
    model = build_model(arch, ds.num_classes, ds.image_shape, cfg.seed)
    model.set_normalization(ds.mean, ds.std)
    buffer = TrajectoryBuffer(
        arch=arch,
        num_classes=ds.num_classes,
        input_shape=ds.image_shape,
        source_digest=ds.digest(),
        normalization=(ds.mean.clone(), ds.std.clone()),
    )

    def hook(epoch):
        if epoch % snapshot_every == 0:
            buffer.add(epoch, list(model.parameters()))

    train_classifier(model, ds, cfg, snapshot_hook=hook)
    return buffer


def _params_blob(params):
    return b"".join(p.detach().numpy().astype("<f4").tobytes() for p in params)


def _blob_params(blob, like):
    out, offset = [], 0
    for p in like:
        n = p.numel()
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(tuple(p.shape))
        out.append(torch.from_numpy(arr.copy()))
        offset += 4 * n
    if offset != len(blob):
        raise ValueError("parameter blob size mismatch")
    return out


def save_checkpoint(model, path, epoch=0, seed=0):
    """Write `path`.json (manifest) and `path`.bin (little-endian float32 blob)."""
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "epoch": epoch,
        "seed": seed,
        "digest": model.params_digest(),
        "normalization": {
            "mean": model.input_mean.tolist(),
            "std": model.input_std.tolist(),
        },
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(path + ".bin", "wb") as f:
        f.write(_params_blob(model.parameters()))


def load_checkpoint(path) -> Classifier:
    with open(path + ".json") as f:
        manifest = json.load(f)
    model = build_model(
        manifest["arch"], manifest["num_classes"], tuple(manifest["input_shape"]), manifest["seed"]
    )
    with open(path + ".bin", "rb") as f:
        blob = f.read()
    with torch.no_grad():
        for p, q in zip(model.parameters(), _blob_params(blob, list(model.parameters()))):
            p.copy_(q)
    norm = manifest["normalization"]
    model.set_normalization(torch.tensor(norm["mean"]), torch.tensor(norm["std"]))
    if model.params_digest() != manifest["digest"]:
        raise ValueError(f"checkpoint digest mismatch for {path}")
    return model


def save_trajectory(buffer, directory):
    """Checkpoint files plus an ordered index.json inside `directory`."""
    os.makedirs(directory, exist_ok=True)
    index = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "arch": buffer.arch,
        "num_classes": buffer.num_classes,
        "input_shape": list(buffer.input_shape),
        "source_digest": buffer.source_digest,
        "epochs": buffer.epochs,
        "entries": [f"ckpt_{e:04d}" for e in buffer.epochs],
        "normalization": {
            "mean": buffer.normalization[0].tolist(),
            "std": buffer.normalization[1].tolist(),
        },
    }
    with open(os.path.join(directory, "index.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    for epoch, entry in zip(buffer.epochs, index["entries"]):
        model = buffer.make_model(buffer.epochs.index(epoch))
        save_checkpoint(model, os.path.join(directory, entry), epoch=epoch)


def load_trajectory(directory) -> TrajectoryBuffer:
    with open(os.path.join(directory, "index.json")) as f:
        index = json.load(f)
    norm = index["normalization"]
    buffer = TrajectoryBuffer(
        arch=index["arch"],
        num_classes=index["num_classes"],
        input_shape=tuple(index["input_shape"]),
        source_digest=index["source_digest"],
        normalization=(torch.tensor(norm["mean"]), torch.tensor(norm["std"])),
    )
    for epoch, entry in zip(index["epochs"], index["entries"]):
        model = load_checkpoint(os.path.join(directory, entry))
        buffer.add(epoch, list(model.parameters()))
    return buffer
