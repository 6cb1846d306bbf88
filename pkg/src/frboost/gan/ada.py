"""Adaptive discriminator augmentation: the augmentation pipeline and its p controller."""
from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F

DEFAULT_OPS = ("flip", "rot90", "translate", "color")


@dataclasses.dataclass(frozen=True)
class AdaState:
    p: float = 0.0
    overfit_estimate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augmentation probability must lie in [0, 1], got {self.p}")


def ada_update(state: AdaState, real_logits: torch.Tensor, target: float = 0.6, step: float = 0.005, half_life: float = 500.0) -> AdaState:
    """One controller tick.

    The overfitting estimate is an EMA (half-life in batches) of mean
    sign(D(real)); p moves one ``step`` toward the side that brings the
    estimate back to ``target`` and is clamped to [0, 1].
    """
    if real_logits.numel() == 0:
        raise ValueError("real_logits must be non-empty")
    batch_sign = float(torch.sign(real_logits.detach()).mean())
    alpha = 1.0 - 0.5 ** (1.0 / half_life)
    estimate = state.overfit_estimate + alpha * (batch_sign - state.overfit_estimate)
    direction = (estimate > target) - (estimate < target)
    p = min(max(state.p + direction * step, 0.0), 1.0)
    return AdaState(p, estimate)


def _select(mask, a, b):
    return torch.where(mask[:, None, None, None], a, b)


def _rot90(x, gen):
    k = torch.randint(1, 4, (x.shape[0],), generator=gen, device=x.device)
    out = x
    for kk in (1, 2, 3):
        out = _select(k == kk, torch.rot90(x, kk, dims=(2, 3)), out)
    return out


def _translate(x, gen, max_frac=0.125):
    n, _, h, w = x.shape
    m = max(1, int(round(max_frac * h)))
    padded = F.pad(x, (m, m, m, m), mode="reflect")
    dy = torch.randint(-m, m + 1, (n,), generator=gen).tolist()
    dx = torch.randint(-m, m + 1, (n,), generator=gen).tolist()
    return torch.stack([padded[i, :, m + dy[i]: m + dy[i] + h, m + dx[i]: m + dx[i] + w] for i in range(n)])


def _color(x, gen):
    n = x.shape[0]
    brightness = torch.randn(n, 1, 1, 1, generator=gen) * 0.2
    contrast = torch.exp2(torch.randn(n, 1, 1, 1, generator=gen) * 0.5)
    mean = x.mean(dim=[1, 2, 3], keepdim=True)
    return (x - mean) * contrast + mean + brightness


_OPS = {
    "flip": lambda x, gen: x.flip(3),
    "rot90": _rot90,
    "translate": _translate,
    "color": _color,
}


def apply_augmentation(images: torch.Tensor, p: float, rng: torch.Generator, ops=DEFAULT_OPS) -> torch.Tensor:
    """Apply each op in ``ops`` to each image independently with probability ``p``.

    All ops are differentiable in the pixels, so the same pipeline serves
    real and generated images. ``p == 0`` returns the input untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return images
    x = images
    for name in ops:
        mask = torch.rand(x.shape[0], generator=rng) < p
        if mask.any():
            x = _select(mask, _OPS[name](x, rng), x)
    return x
