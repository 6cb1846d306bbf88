"""Style-based generator and residual discriminator.

Layout follows the StyleGAN2 "skip" generator / "resnet" discriminator with
equalized learning rate. Modulation is applied to activations rather than
fused into grouped convolution weights, which is faster on CPU and
numerically equivalent.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SQRT2 = math.sqrt(2.0)


def style_count(resolution: int) -> int:
    """Number of style rows the synthesis network consumes at ``resolution``."""
    return 2 * (int(math.log2(resolution)) - 1)


def _check_resolution(resolution: int) -> int:
    log2 = int(round(math.log2(resolution)))
    if resolution < 8 or 2**log2 != resolution:
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
    return log2


class EqualLinear(nn.Module):
    def __init__(self, in_features, out_features, bias=True, bias_init=0.0, lr_mul=1.0, activation="linear"):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init))) if bias else None
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x):
        w = self.weight * self.weight_gain
        b = self.bias * self.lr_mul if self.bias is not None else None
        x = F.linear(x, w, b)
        if self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2) * SQRT2
        return x


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, bias=True, activation="linear", down=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.padding = kernel_size // 2
        self.activation = activation
        self.down = down

    def forward(self, x):
        x = F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)
        if self.down:
            x = F.avg_pool2d(x, 2)
        if self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2) * SQRT2
        return x


class MappingNetwork(nn.Module):
    """z -> w through ``num_layers`` fully-connected layers; tracks the running mean of w."""

    def __init__(self, z_dim, w_dim, num_layers=8, lr_mul=0.01, activation="lrelu", normalize_z=True, w_avg_beta=0.995):
        super().__init__()
        self.z_dim, self.w_dim = z_dim, w_dim
        self.normalize_z = normalize_z
        self.w_avg_beta = w_avg_beta
        dims = [z_dim] + [w_dim] * num_layers
        self.layers = nn.ModuleList(
            EqualLinear(dims[i], dims[i + 1], lr_mul=lr_mul, activation=activation) for i in range(num_layers)
        )
        self.register_buffer("w_avg", torch.zeros(w_dim))

    def forward(self, z, update_w_avg=False):
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"latent has {z.shape[-1]} entries, mapping expects {self.z_dim}")
        x = z
        if self.normalize_z:
            x = x * (x.square().mean(dim=-1, keepdim=True) + 1e-8).rsqrt()
        for layer in self.layers:
            x = layer(x)
        if update_w_avg:
            with torch.no_grad():
                self.w_avg.copy_(x.detach().mean(0).lerp(self.w_avg, self.w_avg_beta))
        return x


class ModulatedConv(nn.Module):
    """3x3 (or 1x1) convolution whose input channels are scaled by a per-sample style."""

    def __init__(self, in_channels, out_channels, w_dim, kernel_size=3, demodulate=True, up=False):
        super().__init__()
        self.affine = EqualLinear(w_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.demodulate = demodulate
        self.up = up
        self.padding = kernel_size // 2

    def forward(self, x, w):
        styles = self.affine(w)  # N x Cin
        weight = self.weight * self.weight_gain
        if self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = x * styles[:, :, None, None]
        x = F.conv2d(x, weight, padding=self.padding)
        if self.demodulate:
            # per-sample, per-output-channel norm of the modulated weight
            dcoefs = (weight.square().sum(dim=[2, 3])[None] * styles.square()[:, None, :]).sum(2)
            x = x * (dcoefs + 1e-8).rsqrt()[:, :, None, None]
        return x


class SynthesisLayer(nn.Module):
    def __init__(self, in_channels, out_channels, w_dim, resolution, w_index, up=False):
        super().__init__()
        self.conv = ModulatedConv(in_channels, out_channels, w_dim, up=up)
        self.w_index = w_index
        self.resolution = resolution
        self.register_buffer("noise_const", torch.randn(resolution, resolution))
        self.noise_strength = nn.Parameter(torch.zeros([]))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, ws, noise_mode="const"):
        x = self.conv(x, ws[:, self.w_index])
        if noise_mode == "random":
            x = x + torch.randn(x.shape[0], 1, self.resolution, self.resolution, device=x.device, dtype=x.dtype) * self.noise_strength
        elif noise_mode == "const":
            x = x + self.noise_const * self.noise_strength
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2) * SQRT2


class ToRGB(nn.Module):
    def __init__(self, in_channels, w_dim, w_index):
        super().__init__()
        self.conv = ModulatedConv(in_channels, 3, w_dim, kernel_size=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))
        self.w_index = w_index

    def forward(self, x, ws):
        return self.conv(x, ws[:, self.w_index]) + self.bias[None, :, None, None]


def channels_at(res, channel_base, channel_max):
    return max(1, min(channel_base // res, channel_max))


class SynthesisNetwork(nn.Module):
    """W+ (N x L x w_dim) -> image (N x 3 x R x R) in roughly [-1, 1]."""

    def __init__(self, w_dim, resolution, channel_base=2048, channel_max=64):
        super().__init__()
        log2 = _check_resolution(resolution)
        self.w_dim, self.resolution = w_dim, resolution
        c4 = channels_at(4, channel_base, channel_max)
        self.const = nn.Parameter(torch.randn(c4, 4, 4))
        self.layers = nn.ModuleList([SynthesisLayer(c4, c4, w_dim, 4, w_index=0)])
        self.torgbs = nn.ModuleList([ToRGB(c4, w_dim, w_index=1)])
        base = 1
        for lv in range(3, log2 + 1):
            res = 2**lv
            cin, cout = channels_at(res // 2, channel_base, channel_max), channels_at(res, channel_base, channel_max)
            self.layers.append(SynthesisLayer(cin, cout, w_dim, res, w_index=base, up=True))
            self.layers.append(SynthesisLayer(cout, cout, w_dim, res, w_index=base + 1))
            self.torgbs.append(ToRGB(cout, w_dim, w_index=base + 2))
            base += 2
        self.num_ws = 1 + max(m.w_index for m in list(self.layers) + list(self.torgbs))

    def forward(self, ws, noise_mode="const"):
        if ws.ndim != 3 or ws.shape[1] != self.num_ws or ws.shape[2] != self.w_dim:
            raise ValueError(f"expected W+ of shape (N, {self.num_ws}, {self.w_dim}), got {tuple(ws.shape)}")
        x = self.const[None].expand(ws.shape[0], -1, -1, -1)
        x = self.layers[0](x, ws, noise_mode)
        img = self.torgbs[0](x, ws)
        for i, torgb in enumerate(self.torgbs[1:]):
            x = self.layers[1 + 2 * i](x, ws, noise_mode)
            x = self.layers[2 + 2 * i](x, ws, noise_mode)
            img = F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False) + torgb(x, ws)
        return img


class Generator(nn.Module):
    def __init__(self, z_dim=512, w_dim=512, resolution=128, mapping_layers=8, channel_base=2048, channel_max=64):
        super().__init__()
        self.z_dim, self.w_dim, self.resolution = z_dim, w_dim, resolution
        self.mapping = MappingNetwork(z_dim, w_dim, mapping_layers)
        self.synthesis = SynthesisNetwork(w_dim, resolution, channel_base, channel_max)
        self.num_ws = self.synthesis.num_ws

    def broadcast(self, w):
        return w[:, None, :].expand(-1, self.num_ws, -1)

    def forward(self, z, noise_mode="const", update_w_avg=False):
        return self.synthesis(self.broadcast(self.mapping(z, update_w_avg=update_w_avg)), noise_mode)


class MinibatchStd(nn.Module):
    def __init__(self, group_size=4):
        super().__init__()
        self.group_size = group_size

    def forward(self, x):
        n, c, h, w = x.shape
        g = min(self.group_size, n)
        while n % g:
            g -= 1
        y = x.reshape(g, -1, c, h, w)
        y = (y - y.mean(0)).square().mean(0).add(1e-8).sqrt().mean(dim=[1, 2, 3])
        y = y.reshape(-1, 1, 1, 1).repeat(g, 1, h, w)
        return torch.cat([x, y], dim=1)


class DiscriminatorBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv0 = EqualConv2d(cin, cin, 3, activation="lrelu")
        self.conv1 = EqualConv2d(cin, cout, 3, activation="lrelu", down=True)
        self.skip = EqualConv2d(cin, cout, 1, bias=False, down=True)

    def forward(self, x):
        y = self.skip(x)
        x = self.conv1(self.conv0(x))
        return (x + y) / SQRT2


class Discriminator(nn.Module):
    """Image (N x 3 x R x R) -> real/fake logit (N,)."""

    def __init__(self, resolution=128, channel_base=2048, channel_max=64, mbstd_group=4):
        super().__init__()
        log2 = _check_resolution(resolution)
        self.resolution = resolution
        self.fromrgb = EqualConv2d(3, channels_at(resolution, channel_base, channel_max), 1, activation="lrelu")
        self.blocks = nn.Sequential(
            *[
                DiscriminatorBlock(channels_at(2**lv, channel_base, channel_max), channels_at(2 ** (lv - 1), channel_base, channel_max))
                for lv in range(log2, 2, -1)
            ]
        )
        c4 = channels_at(4, channel_base, channel_max)
        self.mbstd = MinibatchStd(mbstd_group)
        self.conv = EqualConv2d(c4 + 1, c4, 3, activation="lrelu")
        self.fc = EqualLinear(c4 * 16, c4, activation="lrelu")
        self.out = EqualLinear(c4, 1)

    def forward(self, img):
        x = self.blocks(self.fromrgb(img))
        x = self.conv(self.mbstd(x))
        return self.out(self.fc(x.flatten(1))).squeeze(1)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x 3 uint8 -> N x 3 x H x W float32 in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`images_to_tensor` with clipping."""
    x = (x.detach().cpu().float().clamp(-1, 1) + 1.0) * 127.5
    return (x + 0.5).to(torch.uint8).permute(0, 2, 3, 1).numpy()
