"""Gradient-matching distillation (also the multi-formation variant via grid)."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..augment import AugmentationPolicy, apply, sample_omega
from ..models import build_model
from .base import BaseDistiller, formation_decode

# Gradient layers below this norm carry only numerical noise (e.g. conv
# biases cancelled by the following normalization layer); matching their
# direction is meaningless and destabilizes the cosine.
ZERO_NORM_EPS = 1e-6


def gradient_distance(grads_a, grads_b):
    """Sum over layers of (1 - cosine similarity), zero-norm layers skipped."""
    grads_a, grads_b = list(grads_a), list(grads_b)
    if len(grads_a) != len(grads_b):
        raise ValueError("gradient collections differ in layer count")
    total = torch.zeros(())
    for a, b in zip(grads_a, grads_b):
        if a.shape != b.shape:
            raise ValueError(f"gradient layer shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.norm() <= ZERO_NORM_EPS or b.norm() <= ZERO_NORM_EPS:
            continue
        total = total + (1 - F.cosine_similarity(a.flatten(), b.flatten(), dim=0))
    return total


def _class_batch(origin, c, batch_size, generator):
    pos = origin.class_index()[c]
    pick = pos[torch.randint(0, len(pos), (min(batch_size, len(pos)),), generator=generator)]
    return origin.images[pick], origin.labels[pick]


class GradientMatchingDistiller(BaseDistiller):
    """Matches per-class training-loss gradients between real and synthetic
    batches over freshly initialized networks, interleaving image updates
    with inner network updates on the synthetic data.

    With grid_factor > 1 this is the multi-formation variant: the stored
    slots pack downsampled subimages and all matching happens on the
    decoded (upsampled) images.
    """

    _method = "gradient-match"

    def __init__(
        self,
        ipc=10,
        iterations=20,
        outer_steps=10,
        inner_steps=10,
        lr_img=0.05,
        lr_net=0.02,
        batch_size=64,
        init="real",
        use_dsa=True,
        grid_factor=1,
        arch="convnet3",
        seed=0,
    ):
        self.ipc = ipc
        self.iterations = iterations
        self.outer_steps = outer_steps
        self.inner_steps = inner_steps
        self.lr_img = lr_img
        self.lr_net = lr_net
        self.batch_size = batch_size
        self.init = init
        self.use_dsa = use_dsa
        self.grid_factor = grid_factor
        self.arch = arch
        self.seed = seed

    def _optimize(self, origin, syn):
        if self._method == "multi-formation-gradient-match" and self.grid_factor < 2:
            raise ValueError("multi-formation requires grid_factor >= 2")
        images = syn.images.clone().requires_grad_(True)
        g = torch.Generator().manual_seed(self.seed + 1)
        opt = torch.optim.SGD([images], lr=self.lr_img, momentum=0.5)
        policy = AugmentationPolicy.training_default()
        k = syn.num_classes
        per_class = syn.ipc * syn.formation.multiplier
        y_syn = syn.labels.repeat_interleave(syn.formation.multiplier)
        history = []
        for it in range(self.iterations):
            net = build_model(self.arch, k, origin.image_shape, seed=self.seed * 1000 + it)
            net.set_normalization(origin.mean, origin.std)
            net_opt = torch.optim.SGD(net.parameters(), lr=self.lr_net, momentum=0.9)
            window_losses = []
            for _ in range(self.outer_steps):
                decoded = formation_decode(syn, images=images).images
                total = torch.zeros(())
                for c in range(k):
                    xr, yr = _class_batch(origin, c, self.batch_size, g)
                    xs = decoded[c * per_class : (c + 1) * per_class]
                    ys = y_syn[c * per_class : (c + 1) * per_class]
                    if self.use_dsa:
                        omega = sample_omega(policy, int(torch.randint(0, 2**31, (1,), generator=g)))
                        xr, xs = apply(xr, omega), apply(xs, omega)
                    g_real = net.loss_gradients(F.cross_entropy(net(xr), yr))
                    g_syn = net.loss_gradients(F.cross_entropy(net(xs), ys), create_graph=True)
                    total = total + gradient_distance(g_syn, g_real)
                opt.zero_grad()
                total.backward()
                opt.step()
                window_losses.append(float(total.detach()))
                if self.inner_steps:
                    train_x = formation_decode(syn, images=images.detach()).images
                    for _ in range(self.inner_steps):
                        loss = F.cross_entropy(net(train_x), y_syn)
                        net_opt.zero_grad()
                        loss.backward()
                        net_opt.step()
            # one entry per fresh-network window; the within-window losses
            # are not comparable across network training states
            history.append(sum(window_losses) / len(window_losses))
        syn.images = images.detach()
        return history


class MultiFormationDistiller(GradientMatchingDistiller):
    """Gradient matching over grid-packed slots (the multi-formation method)."""

    _method = "multi-formation-gradient-match"

    def __init__(
        self,
        ipc=10,
        iterations=20,
        outer_steps=10,
        inner_steps=10,
        lr_img=0.05,
        lr_net=0.02,
        batch_size=64,
        init="real",
        use_dsa=True,
        grid_factor=2,
        arch="convnet3",
        seed=0,
    ):
        super().__init__(
            ipc=ipc,
            iterations=iterations,
            outer_steps=outer_steps,
            inner_steps=inner_steps,
            lr_img=lr_img,
            lr_net=lr_net,
            batch_size=batch_size,
            init=init,
            use_dsa=use_dsa,
            grid_factor=grid_factor,
            arch=arch,
            seed=seed,
        )
