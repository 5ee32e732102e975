"""Differentiable siamese augmentation family.

An OmegaSample fully determines one transform; applying the same sample to a
real and a synthetic batch uses identical parameters (the siamese property).
Every op is differentiable with respect to pixel values, so augmentation can
sit inside the synthetic-image optimization loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

# Declared parameter bounds per op; apply() rejects samples outside them.
OP_BOUNDS = {
    "crop": {"shift": (-0.25, 0.25)},          # fraction of height/width
    "flip": {"flip": (0, 1)},
    "scale": {"factor": (0.8, 1.2)},
    "rotate": {"angle": (-15.0, 15.0)},        # degrees
    "brightness": {"delta": (-0.15, 0.15)},
    "saturation": {"factor": (0.5, 1.5)},
    "contrast": {"factor": (0.7, 1.3)},
    "cutout": {"cx": (0.0, 1.0), "cy": (0.0, 1.0), "ratio": (0.0, 0.5)},
}


class EmptyPolicyError(ValueError):
    """Augmentation policy declares no ops."""


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered op subset with parameter ranges; one random op per batch."""

    ops: tuple = tuple(OP_BOUNDS)
    ranges: dict = field(default_factory=dict)  # per-op overrides within OP_BOUNDS

    def __post_init__(self):
        unknown = [op for op in self.ops if op not in OP_BOUNDS]
        if unknown:
            raise ValueError(f"unknown augmentation ops {unknown}")

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def training_default(cls):
        """Default op subset used by distillation and retraining."""
        return cls(
            ops=("crop", "cutout", "brightness", "contrast"),
            ranges={"crop": {"shift": (-0.125, 0.125)}},
        )

    def range_of(self, op, param):
        lo, hi = OP_BOUNDS[op][param]
        if op in self.ranges and param in self.ranges[op]:
            rlo, rhi = self.ranges[op][param]
            lo, hi = max(lo, rlo), min(hi, rhi)
        return lo, hi


@dataclass(frozen=True)
class OmegaSample:
    """One concrete transform: chosen op plus its parameters."""

    op: str
    params: dict
    seed: int = 0


def identity_omega():
    return OmegaSample(op="brightness", params={"delta": 0.0}, seed=-1)


def sample_omega(policy: AugmentationPolicy, seed: int) -> OmegaSample:
    """Deterministically draw an op and its parameters."""
    if not policy.ops:
        raise EmptyPolicyError("policy declares no augmentation ops")
    g = torch.Generator().manual_seed(seed)

    def uniform(lo, hi):
        return lo + (hi - lo) * float(torch.rand((), generator=g))

    op = policy.ops[int(torch.randint(0, len(policy.ops), (), generator=g))]
    if op == "crop":
        lo, hi = policy.range_of(op, "shift")
        params = {"shift_x": uniform(lo, hi), "shift_y": uniform(lo, hi)}
    elif op == "flip":
        params = {"flip": bool(torch.randint(0, 2, (), generator=g))}
    elif op in ("scale", "saturation", "contrast"):
        params = {"factor": uniform(*policy.range_of(op, "factor"))}
    elif op == "rotate":
        params = {"angle": uniform(*policy.range_of(op, "angle"))}
    elif op == "brightness":
        params = {"delta": uniform(*policy.range_of(op, "delta"))}
    else:  # cutout
        params = {
            "cx": uniform(0.0, 1.0),
            "cy": uniform(0.0, 1.0),
            "ratio": policy.range_of(op, "ratio")[1],
        }
    return OmegaSample(op=op, params=params, seed=seed)


def _check_params(omega):
    bounds = OP_BOUNDS.get(omega.op)
    if bounds is None:
        raise ValueError(f"unknown augmentation op {omega.op!r}")
    for name, value in omega.params.items():
        if name in ("shift_x", "shift_y"):
            name_b = "shift"
        else:
            name_b = name
        lo, hi = bounds[name_b]
        if not lo <= float(value) <= hi:
            raise ValueError(f"{omega.op}.{name}={value} outside declared range [{lo}, {hi}]")


def _affine(x, scale=1.0, angle_deg=0.0):
    if scale == 1.0 and angle_deg == 0.0:
        return x
    a = math.radians(angle_deg)
    theta = torch.tensor(
        [[math.cos(a) / scale, -math.sin(a) / scale, 0.0],
         [math.sin(a) / scale, math.cos(a) / scale, 0.0]],
        dtype=x.dtype,
    ).expand(len(x), 2, 3)
    grid = F.affine_grid(theta, x.shape, align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def apply(images: torch.Tensor, omega: OmegaSample) -> torch.Tensor:
    """Transform a batch; output shape equals input shape."""
    _check_params(omega)
    x = images
    n, c, h, w = x.shape
    p = omega.params
    if omega.op == "crop":
        dy = int(round(p["shift_y"] * h))
        dx = int(round(p["shift_x"] * w))
        if dx == 0 and dy == 0:
            return x
        pad_h, pad_w = abs(dy), abs(dx)
        padded = F.pad(x, (pad_w, pad_w, pad_h, pad_h), mode="replicate")
        return padded[:, :, pad_h + dy : pad_h + dy + h, pad_w + dx : pad_w + dx + w]
    if omega.op == "flip":
        return torch.flip(x, dims=[3]) if p["flip"] else x
    if omega.op == "scale":
        return _affine(x, scale=p["factor"])
    if omega.op == "rotate":
        return _affine(x, angle_deg=p["angle"])
    if omega.op == "brightness":
        if p["delta"] == 0.0:
            return x
        return (x + p["delta"]).clamp(0, 1)
    if omega.op == "saturation":
        mean = x.mean(dim=1, keepdim=True)
        return (mean + p["factor"] * (x - mean)).clamp(0, 1)
    if omega.op == "contrast":
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        return (mean + p["factor"] * (x - mean)).clamp(0, 1)
    # cutout: mask multiply keeps the op differentiable w.r.t. pixels
    size = int(round(p["ratio"] * min(h, w)))
    if size == 0:
        return x
    cy = int(round(p["cy"] * (h - size)))
    cx = int(round(p["cx"] * (w - size)))
    mask = torch.ones(1, 1, h, w, dtype=x.dtype)
    mask[:, :, cy : cy + size, cx : cx + size] = 0.0
    return x * mask + 0.5 * (1 - mask)
