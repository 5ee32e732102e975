"""Trajectory-matching distillation against expert checkpoint buffers."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch.func import functional_call

from ..augment import AugmentationPolicy, apply, sample_omega
from ..models import TrainConfig, record_trajectory
from .base import BaseDistiller, formation_decode

DENOMINATOR_FLOOR = 1e-12


def mtt_loss(student, target, start):
    """Normalized trajectory loss: |student - target|^2 / |start - target|^2."""
    student, target, start = list(student), list(target), list(start)
    if not (len(student) == len(target) == len(start)):
        raise ValueError("parameter collections differ in layer count")
    num = sum(((a - b) ** 2).sum() for a, b in zip(student, target))
    den = sum(((a - b) ** 2).sum() for a, b in zip(start, target))
    if float(den) == 0.0:
        raise ValueError("start and target checkpoints are identical (zero denominator)")
    return num / den.clamp_min(DENOMINATOR_FLOOR)


def default_expert_config(seed=0):
    """Expert training setup: plain SGD so the student unroll (also plain
    SGD) can actually track the expert updates."""
    return TrainConfig(
        epochs=20, batch_size=64, lr=0.01, momentum=0.0, weight_decay=0.0,
        augment=False, seed=seed,
    )


class TrajectoryMatchingDistiller(BaseDistiller):
    """Optimizes synthetic images so a student initialized at an expert
    checkpoint and trained for `student_steps` on the synthetic data lands
    near a later expert checkpoint; gradients flow through the unrolled
    student updates.  The student step size is itself learnable.
    """

    _method = "trajectory-match"

    def __init__(
        self,
        ipc=10,
        iterations=100,
        student_steps=20,
        expert_steps=1,
        max_start_epoch=2,
        lr_img=1.0,
        lr_student=0.05,
        lr_lr=1e-4,
        num_experts=2,
        expert_epochs=20,
        expert_lr=0.01,
        init="real",
        use_dsa=False,
        grid_factor=1,
        arch="convnet3",
        seed=0,
    ):
        self.ipc = ipc
        self.iterations = iterations
        self.student_steps = student_steps
        self.expert_steps = expert_steps
        self.max_start_epoch = max_start_epoch
        self.lr_img = lr_img
        self.lr_student = lr_student
        self.lr_lr = lr_lr
        self.num_experts = num_experts
        self.expert_epochs = expert_epochs
        self.expert_lr = expert_lr
        self.init = init
        self.use_dsa = use_dsa
        self.grid_factor = grid_factor
        self.arch = arch
        self.seed = seed

    def fit(self, origin, buffers=None):
        if buffers is not None:
            min_len = self.max_start_epoch + self.expert_steps + 1
            for buf in buffers:
                if len(buf) < min_len:
                    raise ValueError(
                        f"trajectory has {len(buf)} checkpoints, needs >= {min_len}"
                    )
        self._buffers = buffers
        try:
            return super().fit(origin)
        finally:
            del self._buffers

    def _record_experts(self, origin):
        buffers = []
        for i in range(self.num_experts):
            cfg = default_expert_config(seed=self.seed * 31 + 100 + i)
            cfg.epochs = self.expert_epochs
            cfg.lr = self.expert_lr
            buffers.append(record_trajectory(self.arch, origin, cfg, snapshot_every=1))
        return buffers

    def _optimize(self, origin, syn):
        buffers = self._buffers if self._buffers is not None else self._record_experts(origin)
        images = syn.images.clone().requires_grad_(True)
        lr_s = torch.tensor(float(self.lr_student), requires_grad=True)
        g = torch.Generator().manual_seed(self.seed + 1)
        opt = torch.optim.SGD([images], lr=self.lr_img, momentum=0.5)
        lr_opt = torch.optim.SGD([lr_s], lr=self.lr_lr)
        policy = AugmentationPolicy.training_default()
        template = buffers[0].make_model()
        names = [n for n, _ in template.named_parameters()]
        y_syn = syn.labels.repeat_interleave(syn.formation.multiplier)
        history = []
        for it in range(self.iterations):
            buf = buffers[int(torch.randint(0, len(buffers), (1,), generator=g))]
            t_hi = min(self.max_start_epoch, len(buf) - self.expert_steps - 1)
            t0 = int(torch.randint(0, t_hi + 1, (1,), generator=g))
            start = buf.checkpoints[t0]
            target = buf.checkpoints[t0 + self.expert_steps]
            current = [p.clone().requires_grad_(True) for p in start]
            decoded = formation_decode(syn, images=images).images
            for _ in range(self.student_steps):
                x = decoded
                if self.use_dsa:
                    omega = sample_omega(policy, int(torch.randint(0, 2**31, (1,), generator=g)))
                    x = apply(x, omega)
                out = functional_call(template, dict(zip(names, current)), (x,))
                grads = torch.autograd.grad(F.cross_entropy(out, y_syn), current, create_graph=True)
                current = [p - lr_s * gr for p, gr in zip(current, grads)]
            loss = mtt_loss(current, target, start)
            opt.zero_grad()
            lr_opt.zero_grad()
            loss.backward()
            opt.step()
            lr_opt.step()
            history.append(float(loss.detach()))
        self.learned_lr_student_ = float(lr_s.detach())
        syn.images = images.detach()
        return history
