"""Latent-interpolation augmentation: mix two people's W+ codes, label the result with a two-hot target."""
from __future__ import annotations

import dataclasses

import numpy as np
import torch

from frboost.facerec.losses import TwoHotLabel
from frboost.gan.networks import images_to_tensor, tensor_to_images
from frboost.gan.train import synthesize


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return images_to_tensor(image[None] if image.ndim == 3 else image)
    return image[None] if image.ndim == 3 else image


def _encoder_input(encoder, x: torch.Tensor) -> torch.Tensor:
    size = encoder.trunk_config.input_size
    if x.shape[-1] != size:
        x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


@torch.no_grad()
def make_interpolation(I1, I2, encoder, generator, rng: np.random.Generator, identity_1: int = 0, identity_2: int = 1, lam: float | None = None):
    """Return (image, label) for G(lam * E(I1) + (1 - lam) * E(I2)).

    ``lam`` is drawn from U[0, 1] unless pinned. The label puts ``lam`` on
    identity_1 (``index_b``) and ``1 - lam`` on identity_2 (``index_a``), so
    the weight on each person equals their share of the latent code.
    The image is a 3 x R x R tensor in [-1, 1] at generator resolution.
    """
    if lam is None:
        lam = float(rng.random())
    encoder.eval()
    codes = encoder(_encoder_input(encoder, torch.cat([_as_batch(I1), _as_batch(I2)])))
    mixed = lam * codes[0:1] + (1.0 - lam) * codes[1:2]
    image = synthesize(generator, mixed)[0]
    if identity_1 == identity_2:
        return image, TwoHotLabel.hard(identity_1)
    return image, TwoHotLabel(identity_2, identity_1, lam)


@dataclasses.dataclass
class InterpolationPool:
    """Synthesized mixtures: uint8 images plus per-sample two-hot labels."""

    images: np.ndarray
    index_a: np.ndarray
    index_b: np.ndarray
    lam: np.ndarray

    def __len__(self) -> int:
        return len(self.lam)

    def label(self, i: int) -> TwoHotLabel:
        return TwoHotLabel(int(self.index_a[i]), int(self.index_b[i]), float(self.lam[i]))


@torch.no_grad()
def build_interpolation_pool(dataset, encoder, generator, n: int, seed: int = 0, batch_size: int = 64) -> InterpolationPool:
    """Draw ``n`` pairs of distinct people (one random image each) and mix them."""
    if dataset.n_people < 2:
        raise ValueError("interpolation needs at least two identities")
    rng = np.random.default_rng(seed)
    people = dataset.person_indices()
    encoder.eval()
    images, ia, ib, lams = [], [], [], []
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        p1 = rng.integers(0, dataset.n_people, m)
        p2 = (p1 + rng.integers(1, dataset.n_people, m)) % dataset.n_people
        i1 = np.array([rng.choice(people[p]) for p in p1])
        i2 = np.array([rng.choice(people[p]) for p in p2])
        lam = rng.random(m)
        x1 = _encoder_input(encoder, images_to_tensor(dataset.images[i1]))
        x2 = _encoder_input(encoder, images_to_tensor(dataset.images[i2]))
        lam_t = torch.from_numpy(lam).float()[:, None, None]
        mixed = lam_t * encoder(x1) + (1.0 - lam_t) * encoder(x2)
        images.append(tensor_to_images(synthesize(generator, mixed)))
        ia.append(p2)
        ib.append(p1)
        lams.append(lam)
    return InterpolationPool(np.concatenate(images), np.concatenate(ia), np.concatenate(ib), np.concatenate(lams))
