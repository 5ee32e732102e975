"""Synthetic dataset container, formation codec, initialization, and IO."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from ..datasets import LabeledDataset

SYNTHETIC_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FormationSpec:
    """identity stores full images; grid(f) packs f x f downsampled subimages
    per stored slot and decodes them back to full resolution by upsampling."""

    kind: str = "identity"     # identity | grid
    factor: int = 1

    def __post_init__(self):
        if self.kind not in ("identity", "grid"):
            raise ValueError(f"unknown formation kind {self.kind!r}")
        if self.kind == "grid" and self.factor < 2:
            raise ValueError("grid formation needs factor >= 2")
        if self.kind == "identity" and self.factor != 1:
            raise ValueError("identity formation has factor 1")

    @property
    def multiplier(self):
        return self.factor ** 2 if self.kind == "grid" else 1

    def check_resolution(self, h, w):
        if self.kind == "grid" and (h % self.factor or w % self.factor):
            raise ValueError(f"resolution {h}x{w} not divisible by grid factor {self.factor}")


@dataclass
class SyntheticDataset:
    """Learnable images with fixed balanced labels.

    `ipc` counts stored slots per class; a grid(f) formation decodes each
    slot into f^2 training images, so the decoded count is K * ipc * f^2
    while the stored pixel budget stays equal to the identity budget.
    """

    images: torch.Tensor          # (K * ipc, C, H, W) stored slots
    labels: torch.Tensor          # (K * ipc,) one label per slot
    ipc: int
    num_classes: int
    formation: FormationSpec
    mean: torch.Tensor            # origin normalization, carried for retraining
    std: torch.Tensor
    origin_digest: str = ""
    method: str = "none"
    init: str = "real"
    seed: int = 0

    def __post_init__(self):
        if len(self.images) != self.num_classes * self.ipc:
            raise ValueError("stored count must equal K * ipc")
        expected = torch.arange(self.num_classes).repeat_interleave(self.ipc)
        if not torch.equal(self.labels, expected):
            raise ValueError("labels must be balanced and class-ordered")
        self.formation.check_resolution(*self.images.shape[2:])

    def class_slice(self, c):
        return self.images[c * self.ipc : (c + 1) * self.ipc]

    def stored_pixels(self):
        return self.images.numel()

    def decoded_count(self):
        return len(self.images) * self.formation.multiplier


def formation_decode(syn: SyntheticDataset, images=None) -> LabeledDataset:
    """Decode stored slots into the training-ready dataset.

    Differentiable, so engines can optimize stored pixels through the
    decoder.  Pass `images` to decode a live (graph-attached) tensor in
    place of the stored one.
    """
    x = syn.images if images is None else images
    f = syn.formation.factor
    if syn.formation.kind == "identity":
        out, labels = x, syn.labels
    else:
        syn.formation.check_resolution(*x.shape[2:])
        n, c, h, w = x.shape
        # split each slot into f*f tiles, upsample each back to full size
        tiles = x.view(n, c, f, h // f, f, w // f).permute(0, 2, 4, 1, 3, 5)
        tiles = tiles.reshape(n * f * f, c, h // f, w // f)
        out = F.interpolate(tiles, size=(h, w), mode="bilinear", align_corners=False)
        labels = syn.labels.repeat_interleave(f * f)
    return LabeledDataset(
        images=out.clamp(0, 1) if not out.requires_grad else out,
        labels=labels,
        num_classes=syn.num_classes,
        mean=syn.mean,
        std=syn.std,
        name=f"synthetic-{syn.method}",
    )


def _pack_grid(samples, f, h, w):
    """Inverse of the grid decode: pack f*f full images into one slot."""
    small = F.interpolate(samples, size=(h // f, w // f), mode="bilinear", align_corners=False)
    n, c = small.shape[0] // (f * f), small.shape[1]
    tiles = small.view(n, f, f, c, h // f, w // f).permute(0, 3, 1, 4, 2, 5)
    return tiles.reshape(n, c, h, w)


def init_synthetic(origin, ipc, formation=None, init="real", seed=0, method="none") -> SyntheticDataset:
    """Starting synthetic set: copied origin samples or Gaussian noise.

    Real init consumes ipc * f^2 origin samples per class for grid(f)
    formations (downsampled and packed).  Noise init draws a standard
    Gaussian in normalized space, mapped back to raw pixels.
    """
    formation = formation or FormationSpec()
    if init not in ("real", "noise"):
        raise ValueError(f"unknown init mode {init!r}")
    k = origin.num_classes
    c, h, w = origin.image_shape
    formation.check_resolution(h, w)
    need = ipc * formation.multiplier
    g = torch.Generator().manual_seed(seed)
    if init == "real":
        counts = origin.class_counts()
        if need > int(counts.min()):
            raise ValueError(
                f"real init needs {need} samples per class, smallest class has {int(counts.min())}"
            )
        slots = []
        for pos in origin.class_index():
            pick = pos[torch.randperm(len(pos), generator=g)[:need]]
            samples = origin.images[pick]
            if formation.kind == "grid":
                slots.append(_pack_grid(samples, formation.factor, h, w))
            else:
                slots.append(samples.clone())
        images = torch.cat(slots)
    else:
        z = torch.randn(k * ipc, c, h, w, generator=g)
        images = (origin.mean.view(1, -1, 1, 1) + origin.std.view(1, -1, 1, 1) * z).clamp(0, 1)
    return SyntheticDataset(
        images=images,
        labels=torch.arange(k).repeat_interleave(ipc),
        ipc=ipc,
        num_classes=k,
        formation=formation,
        mean=origin.mean.clone(),
        std=origin.std.clone(),
        origin_digest=origin.digest(),
        method=method,
        init=init,
        seed=seed,
    )


def save_synthetic(syn: SyntheticDataset, path):
    """`path`.json manifest + `path`.bin little-endian float32 image blob.

    Round-trip is bit-exact: float32 tensors serialize losslessly.
    """
    manifest = {
        "schema_version": SYNTHETIC_SCHEMA_VERSION,
        "method": syn.method,
        "ipc": syn.ipc,
        "num_classes": syn.num_classes,
        "formation": {"kind": syn.formation.kind, "factor": syn.formation.factor},
        "init": syn.init,
        "seed": syn.seed,
        "origin_digest": syn.origin_digest,
        "shape": list(syn.images.shape),
        "labels": syn.labels.tolist(),
        "normalization": {"mean": syn.mean.tolist(), "std": syn.std.tolist()},
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(path + ".bin", "wb") as f:
        f.write(syn.images.detach().numpy().astype("<f4").tobytes())


def load_synthetic(path) -> SyntheticDataset:
    with open(path + ".json") as f:
        m = json.load(f)
    if m["schema_version"] != SYNTHETIC_SCHEMA_VERSION:
        raise ValueError(f"unsupported synthetic schema version {m['schema_version']}")
    shape = tuple(m["shape"])
    with open(path + ".bin", "rb") as f:
        blob = f.read()
    if len(blob) != 4 * int(np.prod(shape)):
        raise ValueError(f"image blob size mismatch for {path}")
    images = torch.from_numpy(np.frombuffer(blob, dtype="<f4").reshape(shape).copy())
    return SyntheticDataset(
        images=images,
        labels=torch.tensor(m["labels"], dtype=torch.long),
        ipc=m["ipc"],
        num_classes=m["num_classes"],
        formation=FormationSpec(m["formation"]["kind"], m["formation"]["factor"]),
        mean=torch.tensor(m["normalization"]["mean"]),
        std=torch.tensor(m["normalization"]["std"]),
        origin_digest=m["origin_digest"],
        method=m["method"],
        init=m["init"],
        seed=m["seed"],
    )


class BaseDistiller(BaseEstimator):
    """Shared scaffolding for the distillation engines.

    Subclasses implement `_optimize(origin, syn)` returning the per-step
    loss history.  After `fit`, `synthetic_` holds the result and
    `loss_history_` the recorded matching losses.
    """

    _method = "none"

    def fit(self, origin: LabeledDataset, y=None):
        syn = init_synthetic(
            origin,
            ipc=self.ipc,
            formation=self._formation(),
            init=self.init,
            seed=self.seed,
            method=self._method,
        )
        self.loss_history_ = self._optimize(origin, syn)
        if not all(np.isfinite(self.loss_history_)):
            raise RuntimeError(f"{self._method} distillation diverged (non-finite loss)")
        if not torch.isfinite(syn.images).all():
            raise RuntimeError(f"{self._method} distillation diverged (non-finite images)")
        syn.images = syn.images.detach().clamp(0, 1)
        self.synthetic_ = syn
        return self

    def _formation(self):
        grid = getattr(self, "grid_factor", 1)
        return FormationSpec("grid", grid) if grid > 1 else FormationSpec()

    def _optimize(self, origin, syn):
        raise NotImplementedError
