"""Feature networks for the perceptual loss and FID, and the Frechet distance itself."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class RandomFeaturePyramid(nn.Module):
    """Fixed, seeded, randomly initialised conv pyramid.

    Each stage is conv3x3 -> ReLU -> conv3x3 -> ReLU -> avgpool(2). Parameters
    never train. Any module returning a list of feature maps from
    ``forward`` can be used instead (e.g. a pretrained classifier trunk).
    """

    def __init__(self, channels=(16, 32, 64), seed=1234, in_channels=3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = in_channels
        for c in channels:
            conv_a = nn.Conv2d(cin, c, 3, padding=1)
            conv_b = nn.Conv2d(c, c, 3, padding=1)
            for conv in (conv_a, conv_b):
                fan_in = conv.weight[0].numel()
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
            stages.append(nn.Sequential(conv_a, nn.ReLU(), conv_b, nn.ReLU()))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = stage(x)
            feats.append(x)
        return feats

    def embed(self, x):
        """Pooled descriptor: per-stage global average pool, concatenated."""
        return torch.cat([f.mean(dim=[2, 3]) for f in self(x)], dim=1)


def _unit_normalize(f, eps=1e-10):
    return f / (f.square().sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(feature_net, img1, img2):
    """Sum over feature levels of mean squared differences of channel-normalised maps.

    Returns one value per batch element (shape ``(N,)``). Images are
    ``N x 3 x H x W`` in [-1, 1].
    """
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
    total = 0.0
    for f1, f2 in zip(feature_net(img1), feature_net(img2)):
        total = total + (_unit_normalize(f1) - _unit_normalize(f2)).square().mean(dim=[1, 2, 3])
    return total


def _sqrtm_trace(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """trace((A B)^{1/2}) via the symmetric form (A^{1/2} B A^{1/2})^{1/2}."""
    ev, vec = np.linalg.eigh(sigma_a)
    ev = np.clip(ev, 0.0, None)
    root_a = (vec * np.sqrt(ev)) @ vec.T
    inner = root_a @ sigma_b @ root_a
    inner = (inner + inner.T) / 2.0
    ev_inner = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    return float(np.sqrt(ev_inner).sum())


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b, jitter=1e-6) -> float:
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    sigma_a, sigma_b = np.asarray(sigma_a, np.float64), np.asarray(sigma_b, np.float64)
    for name, s in (("a", sigma_a), ("b", sigma_b)):
        if np.linalg.eigvalsh(s).min() <= 0:
            log.warning("covariance %s is singular; adding %.0e diagonal jitter", name, jitter)
            # jitter both sides so identical inputs stay at distance 0
            eye = np.eye(len(sigma_a)) * jitter
            sigma_a, sigma_b = sigma_a + eye, sigma_b + eye
            break
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * _sqrtm_trace(sigma_a, sigma_b)
    return float(max(value, 0.0))


def fid_from_features(feats_a, feats_b) -> float:
    fa, fb = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


@torch.no_grad()
def extract_features(feature_net, images, batch_size=256) -> np.ndarray:
    """Pooled descriptors for ``N x 3 x H x W`` float images or ``N x H x W x 3`` uint8 arrays."""
    from frboost.gan.networks import images_to_tensor

    if isinstance(images, np.ndarray):
        images = images_to_tensor(images)
    embed = feature_net.embed if hasattr(feature_net, "embed") else (lambda x: feature_net(x))
    out = [embed(images[i: i + batch_size].float()).double().cpu().numpy() for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def fid(feature_net, images_a, images_b, batch_size=256) -> float:
    """Frechet distance between pooled-feature Gaussians of two image sets."""
    return fid_from_features(extract_features(feature_net, images_a, batch_size), extract_features(feature_net, images_b, batch_size))
