"""Recognition backbone: transferable trunk + output block producing the embedding."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from frboost.checkpoint import Checkpoint
from frboost.encoder.train import EncoderConfig
from frboost.encoder.trunk import Trunk, TrunkConfig


class TransferError(ValueError):
    """Encoder and backbone trunks disagree in layout."""


class Backbone(nn.Module):
    """Image (N x 3 x S x S) -> embedding (N x emb_dim).

    ``trunk`` carries the transferred parameters; ``output_layer`` is
    BatchNorm2d -> Dropout -> Linear -> BatchNorm1d.
    """

    def __init__(self, trunk_config: TrunkConfig, emb_dim: int = 512, conv_dropout: float = 0.15, output_dropout: float = 0.5, init: str = "scratch"):
        super().__init__()
        self.trunk_config = trunk_config
        self.emb_dim = emb_dim
        self.init_provenance = init
        self.trunk = Trunk(trunk_config, dropout=conv_dropout)
        c = trunk_config.widths[3]
        s = trunk_config.spatial(3)
        self.output_layer = nn.Sequential(
            nn.BatchNorm2d(c), nn.Dropout(output_dropout), nn.Flatten(), nn.Linear(c * s * s, emb_dim), nn.BatchNorm1d(emb_dim)
        )

    def features(self, x):
        return self.trunk(x)

    def forward(self, x):
        return self.output_layer(self.trunk(x)[-1])

    def trainable_when_frozen(self) -> list[nn.Module]:
        """Modules that stay trainable during the freeze epochs."""
        return [self.trunk.input_layer, self.output_layer]

    @classmethod
    def scratch(cls, trunk_config: TrunkConfig, emb_dim: int = 512, seed: int = 0, **kwargs) -> "Backbone":
        torch.manual_seed(seed)
        return cls(trunk_config, emb_dim, init="scratch", **kwargs)


def _trunk_state(ckpt: Checkpoint) -> dict[str, torch.Tensor]:
    sd = ckpt.tensors["encoder"]
    return {k[len("trunk."):]: v for k, v in sd.items() if k.startswith("trunk.")}


def _shape_diff(expected: dict, given: dict) -> list[str]:
    lines = []
    for k in sorted(set(expected) | set(given)):
        if k not in given:
            lines.append(f"missing   {k}: expected {tuple(expected[k].shape)}")
        elif k not in expected:
            lines.append(f"unexpected {k}: {tuple(given[k].shape)}")
        elif tuple(expected[k].shape) != tuple(given[k].shape):
            lines.append(f"shape     {k}: expected {tuple(expected[k].shape)}, got {tuple(given[k].shape)}")
    return lines


def transfer_weights(
    encoder_ckpt: Checkpoint | str | Path,
    emb_dim: int = 512,
    seed: int = 0,
    conv_dropout: float = 0.15,
    output_dropout: float = 0.5,
    trunk_config: TrunkConfig | None = None,
) -> Backbone:
    """Copy the encoder's trunk into a new backbone; style heads are dropped.

    Works for inversion-encoder checkpoints and AE/VAE checkpoints alike. The
    output block is freshly initialised from ``seed``. ``trunk_config``
    defaults to the one recorded in the checkpoint.
    """
    if not isinstance(encoder_ckpt, Checkpoint):
        encoder_ckpt = Checkpoint.load(encoder_ckpt)
    if encoder_ckpt.stage not in ("encoder", "ae", "vae"):
        raise TransferError(f"cannot transfer from a {encoder_ckpt.stage!r} checkpoint")
    source_cfg = EncoderConfig(**encoder_ckpt.config).trunk_config()
    trunk_config = trunk_config or source_cfg
    torch.manual_seed(seed)
    backbone = Backbone(trunk_config, emb_dim, conv_dropout, output_dropout, init=encoder_ckpt.stage)
    state = _trunk_state(encoder_ckpt)
    expected = backbone.trunk.state_dict()
    diff = _shape_diff(expected, state)
    if diff:
        raise TransferError("trunk layout mismatch:\n  " + "\n  ".join(diff))
    backbone.trunk.load_state_dict(state)
    return backbone


def images_for_backbone(images, size: int) -> torch.Tensor:
    """uint8 N x H x W x 3 (or float N x 3 x H x W) -> float tensor resized to ``size``."""
    from frboost.gan.networks import images_to_tensor

    if isinstance(images, np.ndarray):
        images = images_to_tensor(images if images.ndim == 4 else images[None])
    if images.shape[-1] != size:
        images = torch.nn.functional.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    return images


@torch.no_grad()
def embed(backbone: Backbone, images, batch_size: int = 256) -> torch.Tensor:
    """Embeddings in evaluation mode (dropout off, running BatchNorm statistics)."""
    was_training = backbone.training
    backbone.eval()
    x = images_for_backbone(images, backbone.trunk_config.input_size)
    out = torch.cat([backbone(x[i: i + batch_size]) for i in range(0, len(x), batch_size)]) if len(x) else torch.zeros(0, backbone.emb_dim)
    backbone.train(was_training)
    return out


def load_backbone(ckpt: Checkpoint | str | Path) -> Backbone:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.stage != "facerec":
        raise ValueError(f"expected a facerec checkpoint, got stage {ckpt.stage!r}")
    ex = ckpt.extra
    tc = TrunkConfig(ex["trunk_depth"], tuple(ex["trunk_widths"]), ex["trunk_use_se"], ex["input_size"])
    b = Backbone(tc, ex["emb_dim"], ex["conv_dropout"], ex["output_dropout"], init=ex["init"])
    b.load_state_dict(ckpt.tensors["backbone"])
    return b.eval()
