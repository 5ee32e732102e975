"""Labeled image datasets: loading, synthetic generation, subsampling, splits.

Images are stored as float32 tensors of shape (N, C, H, W) with raw pixel
values in [0, 1]; per-channel normalization statistics travel with the
dataset and are applied inside the model input path, so serialized images
stay renderable.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F


class UnknownDatasetError(ValueError):
    """Requested dataset id is not registered."""


class DatasetFilesError(OSError):
    """Dataset files are missing or corrupt."""


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image/label collection with a class index."""

    images: torch.Tensor          # (N, C, H, W) float32, raw [0, 1]
    labels: torch.Tensor          # (N,) int64 in [0, num_classes)
    num_classes: int
    mean: torch.Tensor            # (C,) per-channel normalization mean
    std: torch.Tensor             # (C,) per-channel normalization std
    name: str = "unnamed"

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValueError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels length mismatch")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range for num_classes")
        if len(self.labels) and int(self.labels.min()) < 0:
            raise ValueError("negative label")
        if not torch.isfinite(self.images).all():
            raise ValueError("non-finite pixel values")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_index(self):
        """Per-class list of sample positions; partitions range(len(self))."""
        return [(self.labels == c).nonzero().flatten() for c in range(self.num_classes)]

    def class_counts(self):
        return torch.bincount(self.labels, minlength=self.num_classes)

    def subset(self, positions, name=None):
        positions = torch.as_tensor(positions, dtype=torch.long)
        return replace(
            self,
            images=self.images[positions],
            labels=self.labels[positions],
            name=name or self.name,
        )

    def normalize(self, images=None):
        """Map raw pixels to normalized model-input space."""
        x = self.images if images is None else images
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)

    def denormalize(self, images):
        return images * self.std.view(1, -1, 1, 1) + self.mean.view(1, -1, 1, 1)

    def digest(self):
        """Stable content digest used to tie artifacts to their origin data."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SplitSpec:
    """Per-class member/non-member split request for the privacy audits."""

    members_per_class: int
    nonmembers_per_class: int
    seed: int = 0


@dataclass(frozen=True)
class BlobSpec:
    """Parameters of the deterministic synthetic blob generator.

    Each class owns `modes` smooth grayscale templates.  A sample shows its
    template through a smooth random mask covering `coverage` of the pixels;
    the remainder is filled with a template of a *different* class (a
    distractor), plus pixel noise.  Single samples are therefore weak,
    contaminated views of their class while the clean templates are strong
    ones, which is what gives condensation room to beat random subsets at
    this scale.
    """

    num_classes: int = 10
    channels: int = 1
    size: int = 16
    modes: int = 2
    coverage: float = 0.65
    noise_sigma: float = 0.08
    template_seed: int = 9000


def _normalization_stats(images):
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3)).clamp_min(1e-3)
    return mean, std


def blob_templates(spec: BlobSpec) -> torch.Tensor:
    """Class-mode templates, shape (num_classes * modes, C, size, size)."""
    g = torch.Generator().manual_seed(spec.template_seed)
    raw = torch.rand(spec.num_classes * spec.modes, spec.channels, 4, 4, generator=g)
    t = F.interpolate(raw, size=(spec.size, spec.size), mode="bilinear", align_corners=False)
    lo = t.amin(dim=(1, 2, 3), keepdim=True)
    hi = t.amax(dim=(1, 2, 3), keepdim=True)
    return (t - lo) / (hi - lo + 1e-8)


def make_blobs(spec: BlobSpec, n_per_class: int, seed: int, name="blobs") -> LabeledDataset:
    """Deterministic synthetic dataset; same spec+seed always gives the same tensors."""
    temps = blob_templates(spec)
    k, m, s = spec.num_classes, spec.modes, spec.size
    g = torch.Generator().manual_seed(seed)
    images, labels = [], []
    for c in range(k):
        mode = torch.randint(0, m, (n_per_class,), generator=g)
        base = temps[c * m + mode]
        dcls = torch.randint(0, k - 1, (n_per_class,), generator=g)
        dcls = dcls + (dcls >= c).long()  # distractor class != c
        dmode = torch.randint(0, m, (n_per_class,), generator=g)
        distractor = temps[dcls * m + dmode]
        field_ = F.interpolate(
            torch.rand(n_per_class, 1, 4, 4, generator=g),
            size=(s, s), mode="bilinear", align_corners=False,
        )
        thr = field_.flatten(1).quantile(1 - spec.coverage, dim=1).view(-1, 1, 1, 1)
        mask = (field_ > thr).float()
        x = mask * base + (1 - mask) * distractor
        x = x + spec.noise_sigma * torch.randn(n_per_class, spec.channels, s, s, generator=g)
        images.append(x.clamp(0, 1))
        labels.append(torch.full((n_per_class,), c, dtype=torch.long))
    images = torch.cat(images)
    labels = torch.cat(labels)
    mean, std = _normalization_stats(images)
    return LabeledDataset(images, labels, k, mean, std, name=name)


def _load_blobs(spec: BlobSpec, n_train: int, n_test: int, name: str):
    train = make_blobs(spec, n_train, seed=1, name=f"{name}-train")
    test = make_blobs(spec, n_test, seed=123, name=f"{name}-test")
    # test reuses the train normalization: statistics come from train only
    test = replace(test, mean=train.mean, std=train.std)
    return train, test


def _load_cifar10_like(root):
    """Read the standard CIFAR-10 python-pickle batch layout from `root`."""
    batch_dir = os.path.join(root, "cifar-10-batches-py")
    train_files = [os.path.join(batch_dir, f"data_batch_{i}") for i in range(1, 6)]
    test_files = [os.path.join(batch_dir, "test_batch")]
    for f in train_files + test_files:
        if not os.path.exists(f):
            raise DatasetFilesError(f"missing dataset file: {f}")

    def read(files):
        xs, ys = [], []
        for f in files:
            try:
                with open(f, "rb") as fh:
                    d = pickle.load(fh, encoding="bytes")
                xs.append(torch.tensor(d[b"data"], dtype=torch.float32))
                ys.append(torch.tensor(d[b"labels"], dtype=torch.long))
            except (pickle.UnpicklingError, KeyError, EOFError) as e:
                raise DatasetFilesError(f"corrupt dataset file {f}: {e}") from e
        x = torch.cat(xs).view(-1, 3, 32, 32) / 255.0
        return x, torch.cat(ys)

    xtr, ytr = read(train_files)
    xte, yte = read(test_files)
    mean, std = _normalization_stats(xtr)
    train = LabeledDataset(xtr, ytr, 10, mean, std, name="cifar10-train")
    test = LabeledDataset(xte, yte, 10, mean, std, name="cifar10-test")
    return train, test


_REGISTRY = {
    "blobs-tiny": lambda root: _load_blobs(BlobSpec(), n_train=100, n_test=50, name="blobs-tiny"),
    "blobs": lambda root: _load_blobs(BlobSpec(), n_train=1000, n_test=200, name="blobs"),
    "cifar10-like": _load_cifar10_like,
}


def registered_datasets():
    return sorted(_REGISTRY)


def load_dataset(name: str, root: str = "."):
    """Return (train, test) LabeledDatasets for a registered dataset id."""
    if name not in _REGISTRY:
        raise UnknownDatasetError(f"unknown dataset id {name!r}; known: {registered_datasets()}")
    return _REGISTRY[name](root)


def subsample_per_class(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Uniform draw of exactly `n` samples per class, without replacement."""
    counts = ds.class_counts()
    if n > int(counts.min()):
        raise ValueError(f"n={n} exceeds smallest class count {int(counts.min())}")
    g = torch.Generator().manual_seed(seed)
    keep = []
    for pos in ds.class_index():
        keep.append(pos[torch.randperm(len(pos), generator=g)[:n]])
    return ds.subset(torch.cat(keep), name=f"{ds.name}-sub{n}")


def restrict_classes(ds: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    """Keep `k` randomly selected classes, relabeled to [0, k) in class order."""
    if k < 2:
        raise ValueError("need at least 2 classes")
    if k > ds.num_classes:
        raise ValueError(f"k={k} exceeds num_classes={ds.num_classes}")
    if k == ds.num_classes:
        return ds
    g = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(ds.num_classes, generator=g)[:k].sort().values
    remap = torch.full((ds.num_classes,), -1, dtype=torch.long)
    remap[chosen] = torch.arange(k)
    keep = torch.isin(ds.labels, chosen).nonzero().flatten()
    out = ds.subset(keep, name=f"{ds.name}-k{k}")
    return replace(out, labels=remap[out.labels], num_classes=k)


def member_split(ds: LabeledDataset, spec: SplitSpec):
    """Disjoint class-balanced (members, nonmembers) pools.

    Members are the distillation origin; nonmembers are held-out samples of
    the same classes, used as the negative pool by the privacy audit.
    """
    need = spec.members_per_class + spec.nonmembers_per_class
    counts = ds.class_counts()
    if need > int(counts.min()):
        raise ValueError(
            f"split needs {need} samples per class, smallest class has {int(counts.min())}"
        )
    g = torch.Generator().manual_seed(spec.seed)
    mem, non = [], []
    for pos in ds.class_index():
        perm = pos[torch.randperm(len(pos), generator=g)]
        mem.append(perm[: spec.members_per_class])
        non.append(perm[spec.members_per_class : need])
    members = ds.subset(torch.cat(mem), name=f"{ds.name}-members")
    nonmembers = ds.subset(torch.cat(non), name=f"{ds.name}-nonmembers")
    return members, nonmembers
