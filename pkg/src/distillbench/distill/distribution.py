"""Distribution-matching distillation: align mean penultimate embeddings."""

from __future__ import annotations

import torch

from ..augment import AugmentationPolicy, apply, sample_omega
from ..models import build_model
from .base import BaseDistiller, formation_decode
from .gradient import _class_batch


class DistributionMatchingDistiller(BaseDistiller):
    """Minimizes the squared distance between mean embeddings of augmented
    synthetic and real per-class batches under freshly sampled networks.
    Only the synthetic images are optimized; network parameters are never
    updated.
    """

    _method = "distribution-match"

    def __init__(
        self,
        ipc=10,
        iterations=300,
        lr_img=1.0,
        batch_size=64,
        init="real",
        use_dsa=True,
        grid_factor=1,
        arch="convnet3",
        seed=0,
    ):
        self.ipc = ipc
        self.iterations = iterations
        self.lr_img = lr_img
        self.batch_size = batch_size
        self.init = init
        self.use_dsa = use_dsa
        self.grid_factor = grid_factor
        self.arch = arch
        self.seed = seed

    def _optimize(self, origin, syn):
        images = syn.images.clone().requires_grad_(True)
        g = torch.Generator().manual_seed(self.seed + 1)
        opt = torch.optim.SGD([images], lr=self.lr_img, momentum=0.5)
        policy = AugmentationPolicy.training_default()
        k = syn.num_classes
        per_class = syn.ipc * syn.formation.multiplier
        history = []
        for it in range(self.iterations):
            net = build_model(self.arch, k, origin.image_shape, seed=self.seed * 77 + it)
            net.set_normalization(origin.mean, origin.std)
            decoded = formation_decode(syn, images=images).images
            total = torch.zeros(())
            for c in range(k):
                xr, _ = _class_batch(origin, c, self.batch_size, g)
                xs = decoded[c * per_class : (c + 1) * per_class]
                if self.use_dsa:
                    omega = sample_omega(policy, int(torch.randint(0, 2**31, (1,), generator=g)))
                    xr, xs = apply(xr, omega), apply(xs, omega)
                total = total + ((net.embed(xs).mean(0) - net.embed(xr).mean(0)) ** 2).sum()
            opt.zero_grad()
            total.backward()
            opt.step()
            history.append(float(total.detach()))
        syn.images = images.detach()
        return history
