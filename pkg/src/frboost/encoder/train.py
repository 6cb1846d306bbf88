"""Stage 2: train the inversion encoder against the frozen generator."""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from frboost.checkpoint import Checkpoint, JsonlLogger, NumericalAbort, state_hash
from frboost.encoder.features import RandomFeaturePyramid, perceptual_distance
from frboost.encoder.psp import Encoder
from frboost.encoder.trunk import TrunkConfig
from frboost.gan.networks import Generator, images_to_tensor, tensor_to_images
from frboost.gan.train import load_generator
from frboost.prior_data import write_rgb


@dataclasses.dataclass
class EncoderConfig:
    lambda_l2: float = 1.0
    lambda_lpips: float = 0.8
    lambda_id: float = 0.0
    lambda_reg: float = 0.0
    input_size: int = 112
    total_steps: int = 16_000_000
    trunk_depth: int | str = 50
    use_squeeze_excitation: bool = True
    widths: tuple = (64, 128, 256, 512)
    lr: float = 1e-4
    batch_size: int = 8
    log_every_samples: int = 10_000

    def __post_init__(self):
        for name in ("lambda_l2", "lambda_lpips", "lambda_id", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_id > 0:
            raise ValueError("identity loss is not supported: inversion is trained with fidelity losses only")
        self.widths = tuple(self.widths)

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        base = dict(input_size=28, total_steps=50_000, trunk_depth="micro", widths=(16, 32, 64, 64), lr=1e-3, batch_size=16, log_every_samples=5_000)
        base.update(overrides)
        return cls(**base)

    def trunk_config(self) -> TrunkConfig:
        return TrunkConfig(self.trunk_depth, self.widths, self.use_squeeze_excitation, self.input_size)


def downscale(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


def l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image Euclidean norm of the residual."""
    return (a - b).flatten(1).square().sum(1).sqrt()


def reconstruction_loss(config: EncoderConfig, image, recon_full, feature_net, codes=None, latent_avg=None, reduce=True):
    """lambda_l2 * ||I - down(I_hat)||_2 + lambda_lpips * perceptual(I, down(I_hat)) [+ lambda_reg * ||w - w_avg||^2]."""
    recon = downscale(recon_full, image.shape[-1])
    loss = config.lambda_l2 * l2_distance(image, recon)
    if config.lambda_lpips > 0:
        loss = loss + config.lambda_lpips * perceptual_distance(feature_net, image, recon)
    if config.lambda_reg > 0 and codes is not None:
        ref = latent_avg if latent_avg is not None else 0.0
        loss = loss + config.lambda_reg * (codes - ref).square().flatten(1).sum(1)
    return loss.mean() if reduce else loss


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    import cv2

    if images.shape[1] == size:
        return images
    return np.stack([cv2.resize(im, (size, size), interpolation=cv2.INTER_AREA) for im in images])


def build_encoder(config: EncoderConfig, num_ws: int, w_dim: int) -> Encoder:
    return Encoder(config.trunk_config(), num_ws, w_dim)


def load_encoder(ckpt: Checkpoint | str | Path) -> Encoder:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.stage != "encoder":
        raise ValueError(f"expected an encoder checkpoint, got stage {ckpt.stage!r}")
    config = EncoderConfig(**ckpt.config)
    enc = build_encoder(config, ckpt.extra["num_ws"], ckpt.extra["w_dim"])
    enc.load_state_dict(ckpt.tensors["encoder"])
    return enc.eval()


def _preview(path, inputs, recons):
    grid = np.concatenate([np.concatenate(list(tensor_to_images(t)), axis=1) for t in (inputs, recons)], axis=0)
    write_rgb(path, grid)


def train_encoder(
    prior,
    generator: Generator | Checkpoint | str | Path,
    config: EncoderConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    logger: JsonlLogger | None = None,
    feature_net=None,
) -> Checkpoint:
    """Fit the encoder so that G(E(I)) reconstructs I; the generator never changes."""
    if not isinstance(generator, Generator):
        generator = load_generator(generator)
    generator.eval().requires_grad_(False)
    gen_hash = state_hash(generator.state_dict())

    images = prior.load_images() if hasattr(prior, "load_images") else np.asarray(prior)
    if len(images) == 0:
        raise ValueError("train_encoder needs a non-empty prior dataset")
    if config.input_size > generator.resolution:
        raise ValueError("encoder input_size must not exceed the generator resolution")
    data = images_to_tensor(resize_images(images, config.input_size))

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    feature_net = feature_net or RandomFeaturePyramid()
    logger = logger or JsonlLogger(Path(out_dir) / "encoder_log.jsonl" if out_dir else None)
    enc = build_encoder(config, generator.num_ws, generator.w_dim)
    enc.latent_avg.copy_(generator.mapping.w_avg)
    opt = torch.optim.Adam(enc.parameters(), lr=config.lr)

    def checkpoint(samples, extra=None):
        return Checkpoint(
            "encoder", {"encoder": enc.state_dict()}, dataclasses.asdict(config), samples, {"seed": seed},
            {"num_ws": generator.num_ws, "w_dim": generator.w_dim, "generator_hash": gen_hash, **(extra or {})},
        )

    seen, window, history = 0, [], []
    next_log = config.log_every_samples
    enc.train()
    while seen < config.total_steps:
        bs = min(config.batch_size, config.total_steps - seen)
        batch = data[torch.from_numpy(rng.integers(0, len(data), bs))]
        codes = enc(batch)
        recon = generator.synthesis(codes, noise_mode="const")
        loss = reconstruction_loss(config, batch, recon, feature_net, codes, enc.latent_avg)
        if not math.isfinite(loss.item()):
            path = str(checkpoint(seen, {"aborted": True}).save(Path(out_dir) / "encoder_diagnostic")) if out_dir else None
            raise NumericalAbort(f"non-finite encoder loss at {seen} samples", path)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        seen += bs
        window.append(loss.item())
        if seen >= next_log or seen >= config.total_steps:
            history.append((seen, float(np.mean(window))))
            logger.log(samples_seen=seen, loss=history[-1][1], lambda_l2=config.lambda_l2, lambda_lpips=config.lambda_lpips,
                       lambda_id=config.lambda_id, lambda_reg=config.lambda_reg)
            if out_dir:
                _preview(Path(out_dir) / "previews" / f"encoder_{seen:09d}.png", batch[:8].detach(), downscale(recon[:8].detach(), config.input_size))
            window = []
            while next_log <= seen:
                next_log += config.log_every_samples

    if state_hash(generator.state_dict()) != gen_hash:
        raise RuntimeError("generator parameters changed during encoder training")
    ckpt = checkpoint(seen, {"loss_history": history})
    if out_dir:
        ckpt.save(Path(out_dir) / "encoder")
    return ckpt
