"""Inversion encoder: residual trunk + per-style map2style heads over a three-level pyramid."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from frboost.encoder.trunk import Trunk, TrunkConfig
from frboost.gan.networks import EqualLinear


class Map2Style(nn.Module):
    """Strided 3x3 convs down to 1x1, then a linear layer -> one style vector."""

    def __init__(self, in_channels, out_channels, spatial):
        super().__init__()
        n_down = max(int(math.ceil(math.log2(spatial))), 0) if spatial > 1 else 0
        convs = [nn.Conv2d(in_channels, out_channels, 3, stride=2 if n_down else 1, padding=1), nn.LeakyReLU()]
        for _ in range(n_down - 1):
            convs += [nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1), nn.LeakyReLU()]
        self.convs = nn.Sequential(*convs)
        self.linear = EqualLinear(out_channels, out_channels)

    def forward(self, x):
        x = F.adaptive_avg_pool2d(self.convs(x), 1).flatten(1)
        return self.linear(x)


def pyramid_split(num_ws: int) -> tuple[int, int]:
    """Head index boundaries: [0, coarse) deep, [coarse, middle) mid, [middle, L) shallow."""
    return math.ceil(num_ws / 3), math.ceil(2 * num_ws / 3)


class Encoder(nn.Module):
    """Image (N x 3 x S x S) -> W+ codes (N x L x d).

    Parameters under ``trunk.`` are the transferable convolutional part;
    ``latlayer*`` and ``styles.`` are the style heads.
    """

    def __init__(self, trunk_config: TrunkConfig, num_ws: int, w_dim: int):
        super().__init__()
        self.trunk_config = trunk_config
        self.num_ws, self.w_dim = num_ws, w_dim
        self.trunk = Trunk(trunk_config)
        w = trunk_config.widths
        self.coarse_end, self.middle_end = pyramid_split(num_ws)
        spatial = [trunk_config.spatial(i) for i in (1, 2, 3)]  # shallow, mid, deep
        self.latlayer1 = nn.Conv2d(w[2], w[3], 1)
        self.latlayer2 = nn.Conv2d(w[1], w[3], 1)
        heads = []
        for i in range(num_ws):
            s = spatial[2] if i < self.coarse_end else spatial[1] if i < self.middle_end else spatial[0]
            heads.append(Map2Style(w[3], w_dim, s))
        self.styles = nn.ModuleList(heads)
        self.register_buffer("latent_avg", torch.zeros(w_dim))

    def forward(self, x):
        size = self.trunk_config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(f"encoder expects N x 3 x {size} x {size} input, got {tuple(x.shape)}")
        _, c1, c2, c3 = self.trunk(x)
        p2 = F.interpolate(c3, size=c2.shape[-2:], mode="bilinear", align_corners=False) + self.latlayer1(c2)
        p1 = F.interpolate(p2, size=c1.shape[-2:], mode="bilinear", align_corners=False) + self.latlayer2(c1)
        codes = []
        for i, head in enumerate(self.styles):
            src = c3 if i < self.coarse_end else p2 if i < self.middle_end else p1
            codes.append(head(src))
        return torch.stack(codes, dim=1) + self.latent_avg


def encode(encoder: Encoder, image) -> torch.Tensor:
    """W+ code for one image (3 x S x S tensor) or a batch; eval mode, no grad."""
    if isinstance(image, np.ndarray):
        from frboost.gan.networks import images_to_tensor

        image = images_to_tensor(image if image.ndim == 4 else image[None])
    single = image.ndim == 3
    if single:
        image = image[None]
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(image)
    encoder.train(was_training)
    return out[0] if single else out
