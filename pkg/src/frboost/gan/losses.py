"""Regularizers for adversarial training."""
from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F


def r1_penalty(discriminator, real_images: torch.Tensor) -> torch.Tensor:
    """Batch mean of ||d D(x) / d x||^2 at real samples.

    ``real_images`` must require grad. The graph is kept so the penalty can be
    backpropagated into the discriminator.
    """
    if not real_images.requires_grad:
        raise ValueError("real_images must require grad")
    logits = discriminator(real_images)
    if not logits.requires_grad:  # output does not depend on the input
        return real_images.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), real_images, create_graph=True, allow_unused=True)
    if grad is None:
        return real_images.new_zeros(())
    return grad.square().flatten(1).sum(1).mean()


@dataclasses.dataclass
class PathLengthState:
    mean: float = 0.0
    decay: float = 0.01
    last_lengths: torch.Tensor | None = None


def path_length_penalty(generator, w_batch: torch.Tensor, state: PathLengthState, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Squared deviation of per-sample Jacobian-product norms from their running mean.

    ``generator`` maps ``w_batch`` (``N x L x d`` or ``N x d``) to outputs. The
    projection direction is Gaussian noise scaled by 1/sqrt(H*W) for image
    outputs unless given explicitly. ``state.mean`` is moved toward the batch
    mean of the lengths before the penalty is formed.
    """
    if not w_batch.requires_grad:
        raise ValueError("w_batch must require grad")
    out = generator(w_batch)
    if noise is None:
        scale = 1.0 / math.sqrt(out.shape[2] * out.shape[3]) if out.ndim == 4 else 1.0
        noise = torch.randn_like(out) * scale
    grad = None
    if out.requires_grad:
        (grad,) = torch.autograd.grad((out * noise).sum(), w_batch, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(w_batch)
    sq = grad.square().sum(-1)
    if sq.ndim > 1:
        sq = sq.mean(-1)
    # sqrt has an infinite slope at 0; mask instead of adding an epsilon so exact zeros stay exact
    lengths = sq.clamp_min(1e-30).sqrt() * (sq > 0)
    state.mean = state.mean + state.decay * (float(lengths.detach().mean()) - state.mean)
    state.last_lengths = lengths.detach()
    return (lengths - state.mean).square().mean()


def d_logistic_loss(real_logits, fake_logits):
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def g_nonsaturating_loss(fake_logits):
    return F.softplus(-fake_logits).mean()
