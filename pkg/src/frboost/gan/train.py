"""Stage 1: adversarial training of the generative prior."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from pathlib import Path

import cv2
import numpy as np
import torch

from frboost.checkpoint import Checkpoint, JsonlLogger, NumericalAbort
from frboost.encoder.features import RandomFeaturePyramid, fid
from frboost.gan.ada import DEFAULT_OPS, AdaState, ada_update, apply_augmentation
from frboost.gan.losses import PathLengthState, d_logistic_loss, g_nonsaturating_loss, path_length_penalty, r1_penalty
from frboost.gan.networks import Discriminator, Generator, images_to_tensor, style_count

log = logging.getLogger(__name__)


@dataclasses.dataclass
class GanConfig:
    latent_dim: int = 512
    mapping_layers: int = 8
    resolution: int = 128
    g_lr: float = 0.002
    d_lr: float = 0.00235
    lambda_gp: float = 4.0
    lambda_plp: float = 2.0
    ada_start_p: float = 0.0
    ada_target: float = 0.6
    total_samples: int = 8_000_000
    batch_size: int = 32
    # not fixed by the method description; StyleGAN2 conventions
    channel_base: int = 16384
    channel_max: int = 512
    r1_interval: int = 16
    plp_interval: int = 8
    ada_step: float = 0.005
    ada_half_life: float = 500.0
    ada_ops: tuple = DEFAULT_OPS
    beta1: float = 0.0
    beta2: float = 0.99
    ema_half_life_samples: int = 10_000
    log_every_samples: int = 10_000
    fid_every_samples: int = 0
    fid_samples: int = 1000

    def __post_init__(self):
        log2 = math.log2(self.resolution)
        if self.resolution < 8 or log2 != int(log2):
            raise ValueError("resolution must be a power of two >= 8")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.ada_start_p <= 1.0:
            raise ValueError("ada_start_p must lie in [0, 1]")
        if not 0.0 < self.ada_target < 1.0:
            raise ValueError("ada_target must lie in (0, 1)")
        self.ada_ops = tuple(self.ada_ops)

    @classmethod
    def desk(cls, **overrides) -> "GanConfig":
        base = dict(
            resolution=32, latent_dim=64, mapping_layers=4, total_samples=200_000,
            channel_base=256, channel_max=32, ema_half_life_samples=5_000, fid_samples=500,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def num_ws(self) -> int:
        return style_count(self.resolution)


def build_generator(config: GanConfig) -> Generator:
    return Generator(config.latent_dim, config.latent_dim, config.resolution, config.mapping_layers, config.channel_base, config.channel_max)


def build_discriminator(config: GanConfig) -> Discriminator:
    return Discriminator(config.resolution, config.channel_base, config.channel_max)


def load_generator(ckpt: Checkpoint | str | Path, group: str = "generator") -> Generator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.stage != "gan":
        raise ValueError(f"expected a gan checkpoint, got stage {ckpt.stage!r}")
    config = GanConfig(**ckpt.config)
    g = build_generator(config)
    g.load_state_dict(ckpt.tensors[group])
    return g.eval().requires_grad_(False)


# -- latent plumbing -------------------------------------------------------


def map_latent(z: torch.Tensor, mapping) -> torch.Tensor:
    return mapping(z)


def broadcast_latent(w: torch.Tensor, num_ws: int) -> torch.Tensor:
    """Repeat ``w`` (``N x d`` or ``d``) into ``num_ws`` identical W+ rows."""
    if not torch.isfinite(w).all():
        raise ValueError("w must be finite")
    if w.ndim == 1:
        return w[None].expand(num_ws, -1).clone()
    return w[:, None, :].expand(-1, num_ws, -1).clone()


def synthesize(generator: Generator, w_plus: torch.Tensor, noise_mode: str = "const") -> torch.Tensor:
    squeeze = w_plus.ndim == 2
    if squeeze:
        w_plus = w_plus[None]
    img = generator.synthesis(w_plus, noise_mode=noise_mode)
    return img[0] if squeeze else img


@torch.no_grad()
def sample_faces(generator: Generator | Checkpoint, n: int, rng: torch.Generator | int = 0, batch_size: int = 256, truncation: float = 1.0) -> torch.Tensor:
    """``n`` images from z ~ N(0, I) through map -> broadcast -> synthesize (N x 3 x R x R)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if isinstance(generator, Checkpoint):
        generator = load_generator(generator)
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    res = generator.resolution
    out = torch.empty(n, 3, res, res)
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        z = torch.randn(m, generator.z_dim, generator=rng)
        w = generator.mapping(z)
        if truncation != 1.0:
            w = generator.mapping.w_avg.lerp(w, truncation)
        out[start: start + m] = synthesize(generator, broadcast_latent(w, generator.num_ws))
    return out


# -- training --------------------------------------------------------------


def prepare_images(images, resolution: int) -> np.ndarray:
    """Load a dataset into an N x R x R x 3 uint8 array, resizing if needed."""
    if hasattr(images, "load_images"):
        images = images.load_images()
    images = np.asarray(images)
    if len(images) and images.shape[1] != resolution:
        images = np.stack([cv2.resize(im, (resolution, resolution), interpolation=cv2.INTER_AREA) for im in images])
    return images


def _set_lr(opt, lr, betas):
    for g in opt.param_groups:
        g["lr"] = lr
        g["betas"] = betas


def train_gan(
    dataset,
    config: GanConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    logger: JsonlLogger | None = None,
    fid_reference=None,
    feature_net=None,
) -> Checkpoint:
    """Non-saturating GAN training with lazy R1 and path-length regularization and ADA.

    ``dataset`` is a :class:`PriorDataset` or an N x H x W x 3 uint8 array.
    FID is computed every ``fid_every_samples`` against ``fid_reference`` or,
    when absent, a held-out slice of the dataset. The returned checkpoint
    stores the EMA generator under ``"generator"``.
    """
    images = prepare_images(dataset, config.resolution)
    if len(images) == 0:
        raise ValueError("train_gan needs a non-empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    aug_gen = torch.Generator().manual_seed(seed + 1)
    logger = logger or JsonlLogger(Path(out_dir) / "gan_log.jsonl" if out_dir else None)

    if fid_reference is None and config.fid_every_samples and len(images) >= 50:
        perm = rng.permutation(len(images))
        n_hold = min(config.fid_samples, len(images) // 10)
        fid_reference, images = images[perm[:n_hold]], images[perm[n_hold:]]
    feature_net = feature_net or RandomFeaturePyramid()
    data = images_to_tensor(images)

    G, D = build_generator(config), build_discriminator(config)
    G_ema = copy.deepcopy(G).eval().requires_grad_(False)
    ratio_d = config.r1_interval / (config.r1_interval + 1)
    ratio_g = config.plp_interval / (config.plp_interval + 1)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.g_lr * ratio_g, betas=(config.beta1**ratio_g, config.beta2**ratio_g))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.d_lr * ratio_d, betas=(config.beta1**ratio_d, config.beta2**ratio_d))
    ada = AdaState(config.ada_start_p, 0.0)
    plp_state = PathLengthState()
    bs = config.batch_size
    ema_beta = 0.5 ** (bs / max(config.ema_half_life_samples, 1e-8))

    def checkpoint(samples_seen, extra=None):
        return Checkpoint(
            "gan",
            {"generator": G_ema.state_dict(), "generator_live": G.state_dict(), "discriminator": D.state_dict()},
            dataclasses.asdict(config), samples_seen, {"seed": seed}, {"ada_p": ada.p, **(extra or {})},
        )

    def current_fid():
        if fid_reference is None or len(fid_reference) < 2:
            return None
        fakes = sample_faces(G_ema, min(config.fid_samples, 2 * len(fid_reference)), rng=seed + 7)
        return fid(feature_net, fakes, images_to_tensor(np.asarray(fid_reference)))

    samples_seen, step = 0, 0
    fid_history = []
    running = {"g_loss": 0.0, "d_loss": 0.0, "r1": 0.0, "plp": 0.0, "n": 0}
    next_log = config.log_every_samples
    next_fid = config.fid_every_samples if config.fid_every_samples else None
    if config.total_samples > 0 and next_fid is not None:
        fid_history.append((0, current_fid()))
        logger.log(samples_seen=0, g_loss=None, d_loss=None, r1=None, plp=None, ada_p=ada.p, fid=fid_history[-1][1])

    while samples_seen < config.total_samples:
        idx = torch.from_numpy(rng.integers(0, len(data), bs))
        real = data[idx]

        # discriminator
        z = torch.randn(bs, config.latent_dim)
        with torch.no_grad():
            fake = G(z, noise_mode="random")
        real_logits = D(apply_augmentation(real, ada.p, aug_gen, config.ada_ops))
        fake_logits = D(apply_augmentation(fake, ada.p, aug_gen, config.ada_ops))
        d_loss = d_logistic_loss(real_logits, fake_logits)
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()
        ada = ada_update(ada, real_logits, config.ada_target, config.ada_step, config.ada_half_life)

        r1_val = None
        if step % config.r1_interval == 0 and config.lambda_gp > 0:
            real_aug = apply_augmentation(real, ada.p, aug_gen, config.ada_ops).detach().requires_grad_(True)
            r1 = r1_penalty(D, real_aug)
            opt_d.zero_grad(set_to_none=True)
            (r1 * (config.lambda_gp / 2) * config.r1_interval).backward()
            opt_d.step()
            r1_val = r1.item()

        # generator
        z = torch.randn(bs, config.latent_dim)
        fake = G(z, noise_mode="random", update_w_avg=True)
        g_loss = g_nonsaturating_loss(D(apply_augmentation(fake, ada.p, aug_gen, config.ada_ops)))
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        plp_val = None
        if step % config.plp_interval == 0 and config.lambda_plp > 0:
            n_pl = max(bs // 2, 1)
            w = G.broadcast(G.mapping(torch.randn(n_pl, config.latent_dim))).detach().requires_grad_(True)
            plp = path_length_penalty(lambda ws: G.synthesis(ws, noise_mode="random"), w, plp_state)
            opt_g.zero_grad(set_to_none=True)
            (plp * config.lambda_plp * config.plp_interval).backward()
            opt_g.step()
            plp_val = plp.item()

        with torch.no_grad():
            for p_ema, p in zip(G_ema.parameters(), G.parameters()):
                p_ema.copy_(p.lerp(p_ema, ema_beta))
            for b_ema, b in zip(G_ema.buffers(), G.buffers()):
                b_ema.copy_(b)

        losses = [d_loss.item(), g_loss.item()] + [v for v in (r1_val, plp_val) if v is not None]
        if not all(math.isfinite(v) for v in losses):
            path = None
            if out_dir:
                path = str(checkpoint(samples_seen, {"aborted": True}).save(Path(out_dir) / "gan_diagnostic"))
            raise NumericalAbort(f"non-finite GAN loss at {samples_seen} samples: {losses}", path)

        samples_seen += bs
        step += 1
        running["g_loss"] += g_loss.item()
        running["d_loss"] += d_loss.item()
        running["r1"] = r1_val if r1_val is not None else running["r1"]
        running["plp"] = plp_val if plp_val is not None else running["plp"]
        running["n"] += 1

        fid_val = None
        # the last step always gets a value, so the final FID is well defined
        if next_fid is not None and (samples_seen >= next_fid or samples_seen >= config.total_samples):
            fid_val = current_fid()
            fid_history.append((samples_seen, fid_val))
            while next_fid <= samples_seen:
                next_fid += config.fid_every_samples
        if samples_seen >= next_log or samples_seen >= config.total_samples or fid_val is not None:
            n = max(running["n"], 1)
            logger.log(
                samples_seen=samples_seen, g_loss=running["g_loss"] / n, d_loss=running["d_loss"] / n,
                r1=running["r1"], plp=running["plp"], ada_p=ada.p, fid=fid_val,
            )
            running.update(g_loss=0.0, d_loss=0.0, n=0)
            while next_log <= samples_seen:
                next_log += config.log_every_samples

    ckpt = checkpoint(samples_seen, {"fid_history": fid_history, "plp_mean": plp_state.mean})
    if out_dir:
        ckpt.save(Path(out_dir) / "gan")
    return ckpt
