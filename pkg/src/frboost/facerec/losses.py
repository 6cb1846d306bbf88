"""Angular-margin classification losses over unit-normalised embeddings and class weights."""
from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn.functional as F
from torch import nn


@dataclasses.dataclass(frozen=True)
class TwoHotLabel:
    """Soft target with mass ``1 - lam`` on ``index_a`` and ``lam`` on ``index_b``."""

    index_a: int
    index_b: int
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.index_a == self.index_b and self.lam not in (0.0, 1.0):
            raise ValueError("a two-hot label with a fractional weight needs two distinct identities")

    @property
    def weight_a(self) -> float:
        return 1.0 - self.lam

    @property
    def weight_b(self) -> float:
        return self.lam

    @classmethod
    def hard(cls, index: int) -> "TwoHotLabel":
        return cls(index, index, 0.0)


def cosine_logits(embeddings: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    return F.linear(F.normalize(embeddings, dim=1), F.normalize(class_weights, dim=1)).clamp(-1.0, 1.0)


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{int(labels.min())}, {int(labels.max())}]")


def additive_margin_cos(cos: torch.Tensor, m: float) -> torch.Tensor:
    """cos(theta + m), falling back to cos(theta) - m*sin(m) once theta + m passes pi.

    The fallback keeps the target logit monotone in theta on the whole range.
    """
    if m == 0:
        return cos
    sin = (1.0 - cos.square()).clamp_min(1e-12).sqrt()
    phi = cos * math.cos(m) - sin * math.sin(m)
    return torch.where(cos > math.cos(math.pi - m), phi, cos - math.sin(m) * m)


def arcface_logits(embeddings, labels, class_weights, s=64.0, m=0.5):
    if s <= 0:
        raise ValueError("scale s must be positive")
    if not 0.0 <= m < math.pi / 2:
        raise ValueError("margin m must lie in [0, pi/2)")
    _check_labels(labels, class_weights.shape[0])
    cos = cosine_logits(embeddings, class_weights)
    onehot = F.one_hot(labels, cos.shape[1]).bool()
    return s * torch.where(onehot, additive_margin_cos(cos, m), cos)


def arcface_loss(embeddings, labels, class_weights, s=64.0, m=0.5, reduction="mean"):
    """Cross-entropy over s*cos(theta_j + m*[j == label])."""
    return F.cross_entropy(arcface_logits(embeddings, labels, class_weights, s, m), labels, reduction=reduction)


def _chebyshev(c: torch.Tensor, n: int) -> torch.Tensor:
    t_prev, t = torch.ones_like(c), c
    if n == 0:
        return t_prev
    for _ in range(n - 1):
        t_prev, t = t, 2 * c * t - t_prev
    return t


def sphereface_psi(cos: torch.Tensor, m_mult: float) -> torch.Tensor:
    """(-1)^k cos(m theta) - 2k with k = floor(m theta / pi): monotone in theta on [0, pi]."""
    theta = torch.acos(cos.detach().clamp(-1.0, 1.0))
    k = torch.floor(m_mult * theta / math.pi)
    if float(m_mult).is_integer():
        cos_m = _chebyshev(cos, int(m_mult))  # polynomial in cos: smooth at cos = +-1
    else:
        cos_m = torch.cos(m_mult * torch.acos(cos.clamp(-1 + 1e-7, 1 - 1e-7)))
        cos_m = torch.where(cos >= 1.0, torch.ones_like(cos_m), cos_m)  # exact at theta = 0
    sign = 1.0 - 2.0 * torch.remainder(k, 2.0)
    return sign * cos_m - 2.0 * k


def sphereface_logits(embeddings, labels, class_weights, m_mult=4, s=64.0):
    if m_mult < 1:
        raise ValueError("m_mult must be >= 1")
    _check_labels(labels, class_weights.shape[0])
    cos = cosine_logits(embeddings, class_weights)
    onehot = F.one_hot(labels, cos.shape[1]).bool()
    return s * torch.where(onehot, sphereface_psi(cos, m_mult), cos)


def sphereface_loss(embeddings, labels, class_weights, m_mult=4, s=64.0, reduction="mean"):
    """Multiplicative angular margin on the target class, cross-entropy wrapper."""
    return F.cross_entropy(sphereface_logits(embeddings, labels, class_weights, m_mult, s), labels, reduction=reduction)


def two_hot_targets(index_a, index_b, lam, n_classes: int) -> torch.Tensor:
    index_a, index_b = torch.as_tensor(index_a).long(), torch.as_tensor(index_b).long()
    lam = torch.as_tensor(lam)
    if not lam.is_floating_point():
        lam = lam.to(torch.get_default_dtype())
    t = torch.zeros(index_a.shape[0], n_classes, dtype=lam.dtype)
    t.scatter_add_(1, index_a[:, None], (1.0 - lam)[:, None])
    t.scatter_add_(1, index_b[:, None], lam[:, None])
    return t


def soft_margin_loss(embeddings, index_a, index_b, lam, class_weights, s=64.0, m=0.5, reduction="mean"):
    """Soft-target cross-entropy; the additive margin hits every class with nonzero target mass.

    ``index_a``, ``index_b`` and ``lam`` are per-sample tensors (or a list of
    :class:`TwoHotLabel` passed as ``index_a`` with the others ``None``).
    At ``lam`` in {0, 1} this is exactly :func:`arcface_loss` on the hard label.
    """
    if index_b is None and lam is None:
        labels = list(index_a)
        index_a = torch.tensor([l.index_a for l in labels])
        index_b = torch.tensor([l.index_b for l in labels])
        lam = torch.tensor([l.lam for l in labels], dtype=embeddings.dtype)
    lam = torch.as_tensor(lam, dtype=embeddings.dtype)
    if lam.numel() and (float(lam.min()) < 0 or float(lam.max()) > 1):
        raise ValueError("lam must lie in [0, 1]")
    n_classes = class_weights.shape[0]
    _check_labels(torch.as_tensor(index_a), n_classes)
    _check_labels(torch.as_tensor(index_b), n_classes)
    if s <= 0:
        raise ValueError("scale s must be positive")
    targets = two_hot_targets(index_a, index_b, lam, n_classes).to(embeddings.dtype)
    cos = cosine_logits(embeddings, class_weights)
    logits = s * torch.where(targets > 0, additive_margin_cos(cos, m), cos)
    loss = -(targets * F.log_softmax(logits, dim=1)).sum(1)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


class MarginHead(nn.Module):
    """Per-identity weight vectors plus the chosen margin loss."""

    def __init__(self, n_classes: int, emb_dim: int, kind: str = "arcface", s: float = 64.0, m: float = 0.5, m_mult: float = 4):
        super().__init__()
        if kind not in ("arcface", "sphereface"):
            raise ValueError(f"unknown loss kind {kind!r}")
        self.weight = nn.Parameter(torch.empty(n_classes, emb_dim))
        nn.init.xavier_uniform_(self.weight)
        self.kind, self.s, self.m, self.m_mult = kind, s, m, m_mult

    def forward(self, embeddings, labels, reduction="mean"):
        if self.kind == "arcface":
            return arcface_loss(embeddings, labels, self.weight, self.s, self.m, reduction)
        return sphereface_loss(embeddings, labels, self.weight, self.m_mult, self.s, reduction)

    def soft(self, embeddings, index_a, index_b, lam, reduction="mean"):
        return soft_margin_loss(embeddings, index_a, index_b, lam, self.weight, self.s, self.m, reduction)

    def predict(self, embeddings):
        return cosine_logits(embeddings, self.weight).argmax(1)
