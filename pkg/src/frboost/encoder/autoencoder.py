"""AE / VAE pretraining baselines sharing the encoder trunk layout."""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from frboost.checkpoint import Checkpoint, JsonlLogger, NumericalAbort
from frboost.encoder.train import EncoderConfig, resize_images
from frboost.encoder.trunk import Trunk, TrunkConfig
from frboost.gan.networks import images_to_tensor


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) per sample, summed over latent dims."""
    return 0.5 * (mu.square() + logvar.exp() - 1.0 - logvar).sum(-1)


class AutoEncoder(nn.Module):
    """Trunk -> flatten -> latent -> mirrored transposed-conv decoder."""

    def __init__(self, trunk_config: TrunkConfig, latent_dim: int, variational: bool):
        super().__init__()
        self.trunk_config = trunk_config
        self.latent_dim = latent_dim
        self.variational = variational
        self.trunk = Trunk(trunk_config)
        w = trunk_config.widths
        s = trunk_config.spatial(3)
        self.deep_shape = (w[3], s, s)
        flat = w[3] * s * s
        self.to_latent = nn.Linear(flat, latent_dim * (2 if variational else 1))
        self.from_latent = nn.Linear(latent_dim, flat)
        ups = []
        chans = list(w[::-1]) + [w[0]]
        for cin, cout in zip(chans[:-1], chans[1:]):
            ups += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.BatchNorm2d(cout), nn.PReLU(cout)]
        self.decoder = nn.Sequential(*ups, nn.Conv2d(w[0], 3, 3, padding=1))

    def encode(self, x):
        h = self.to_latent(self.trunk(x)[-1].flatten(1))
        if self.variational:
            return h.chunk(2, dim=1)
        return h, None

    def decode(self, z):
        x = self.from_latent(z).view(-1, *self.deep_shape)
        x = self.decoder(x)
        size = self.trunk_config.input_size
        if x.shape[-1] != size:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return torch.tanh(x)

    def forward(self, x):
        mu, logvar = self.encode(x)
        if self.variational and self.training:
            z = mu + torch.randn_like(mu) * (0.5 * logvar).exp()
        else:
            z = mu
        return self.decode(z), mu, logvar


def autoencoder_loss(model: AutoEncoder, batch: torch.Tensor, beta: float = 1.0) -> tuple[torch.Tensor, dict]:
    recon, mu, logvar = model(batch)
    rec = (recon - batch).flatten(1).square().sum(1).mean()
    parts = {"recon": rec.item()}
    loss = rec
    if model.variational:
        kl = kl_divergence(mu, logvar).mean()
        parts["kl"] = kl.item()
        loss = loss + beta * kl
    return loss, parts


def train_autoencoder(
    prior,
    variational: bool,
    config: EncoderConfig,
    seed: int = 0,
    latent_dim: int = 512,
    beta: float = 1.0,
    out_dir: str | Path | None = None,
    logger: JsonlLogger | None = None,
) -> Checkpoint:
    images = prior.load_images() if hasattr(prior, "load_images") else np.asarray(prior)
    if len(images) == 0:
        raise ValueError("train_autoencoder needs a non-empty prior dataset")
    data = images_to_tensor(resize_images(images, config.input_size))
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    stage = "vae" if variational else "ae"
    logger = logger or JsonlLogger(Path(out_dir) / f"{stage}_log.jsonl" if out_dir else None)
    model = AutoEncoder(config.trunk_config(), latent_dim, variational)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    def checkpoint(samples, extra=None):
        sd = model.state_dict()
        enc = {k: v for k, v in sd.items() if k.startswith(("trunk.", "to_latent."))}
        dec = {k: v for k, v in sd.items() if not k.startswith(("trunk.", "to_latent."))}
        return Checkpoint(stage, {"encoder": enc, "decoder": dec}, dataclasses.asdict(config), samples, {"seed": seed},
                          {"latent_dim": latent_dim, "beta": beta, "variational": variational, **(extra or {})})

    seen, window, history = 0, [], []
    next_log = config.log_every_samples
    model.train()
    while seen < config.total_steps:
        bs = min(config.batch_size, config.total_steps - seen)
        batch = data[torch.from_numpy(rng.integers(0, len(data), bs))]
        loss, parts = autoencoder_loss(model, batch, beta)
        if not math.isfinite(loss.item()):
            path = str(checkpoint(seen, {"aborted": True}).save(Path(out_dir) / f"{stage}_diagnostic")) if out_dir else None
            raise NumericalAbort(f"non-finite {stage} loss at {seen} samples", path)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        seen += bs
        window.append(loss.item())
        if seen >= next_log or seen >= config.total_steps:
            history.append((seen, float(np.mean(window))))
            logger.log(samples_seen=seen, loss=history[-1][1], **parts)
            window = []
            while next_log <= seen:
                next_log += config.log_every_samples

    ckpt = checkpoint(seen, {"loss_history": history})
    if out_dir:
        ckpt.save(Path(out_dir) / stage)
    return ckpt


def load_autoencoder(ckpt: Checkpoint | str | Path) -> AutoEncoder:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.stage not in ("ae", "vae"):
        raise ValueError(f"expected an ae/vae checkpoint, got stage {ckpt.stage!r}")
    config = EncoderConfig(**ckpt.config)
    model = AutoEncoder(config.trunk_config(), ckpt.extra["latent_dim"], ckpt.extra["variational"])
    model.load_state_dict({**ckpt.tensors["encoder"], **ckpt.tensors["decoder"]})
    return model.eval()


@torch.no_grad()
def sample_vae(model: AutoEncoder, n: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    return model.decode(torch.randn(n, model.latent_dim, generator=gen))
