"""Procedurally rendered face-like images for desk-scale experiments.

Each identity is a parameter vector (face shape, eye spacing and size, mouth,
nose, hair, skin tone). Images of one identity differ by nuisance factors:
pose shift, scale, lighting, background and sensor noise. Skin tone is drawn
around a per-group base colour so the four groups are separable by a
classifier but overlap in identity space.
"""
from __future__ import annotations

import dataclasses

import numpy as np

GROUP_SKIN = {
    1: (0.93, 0.78, 0.66),
    2: (0.45, 0.30, 0.22),
    3: (0.88, 0.72, 0.50),
    4: (0.66, 0.48, 0.34),
}


@dataclasses.dataclass(frozen=True)
class FaceParams:
    skin: tuple[float, float, float]
    face_w: float
    face_h: float
    eye_sep: float
    eye_y: float
    eye_r: float
    iris: tuple[float, float, float]
    mouth_w: float
    mouth_y: float
    mouth_h: float
    lip: tuple[float, float, float]
    nose_len: float
    hair: tuple[float, float, float]
    hair_line: float
    brow_tilt: float


def random_identity(rng: np.random.Generator, group: int | None = None) -> FaceParams:
    if group is None:
        group = int(rng.integers(1, 5))
    base = np.array(GROUP_SKIN[group])
    skin = np.clip(base + rng.normal(0, 0.05, 3), 0, 1)
    u = rng.uniform
    return FaceParams(
        skin=tuple(skin),
        face_w=u(0.27, 0.38),
        face_h=u(0.36, 0.46),
        eye_sep=u(0.13, 0.24),
        eye_y=u(-0.12, -0.02),
        eye_r=u(0.03, 0.06),
        iris=tuple(rng.uniform(0.0, 0.6, 3)),
        mouth_w=u(0.08, 0.22),
        mouth_y=u(0.14, 0.26),
        mouth_h=u(0.015, 0.05),
        lip=tuple(np.clip(skin * u(0.5, 0.8) + np.array([0.2, 0.0, 0.0]), 0, 1)),
        nose_len=u(0.05, 0.14),
        hair=tuple(rng.uniform(0.0, 0.7, 3) * u(0.3, 1.0)),
        hair_line=u(-0.36, -0.2),
        brow_tilt=u(-0.05, 0.05),
    )


def render(params: FaceParams, size: int, rng: np.random.Generator, nuisance: float = 1.0, supersample: int = 2) -> np.ndarray:
    """Render one ``size x size`` uint8 RGB image; ``nuisance=0`` gives the canonical view."""
    s = size * supersample
    coords = (np.arange(s) + 0.5) / s - 0.5
    v, u = np.meshgrid(coords, coords, indexing="ij")  # v: down, u: right
    k = nuisance
    scale = 1.0 + k * rng.uniform(-0.06, 0.06)
    u = (u - k * rng.uniform(-0.05, 0.05)) / scale
    v = (v - k * rng.uniform(-0.05, 0.05)) / scale
    p = params

    img = np.empty((s, s, 3))
    img[:] = np.clip(rng.uniform(0.1, 0.9, 3) if k > 0 else np.array([0.5, 0.5, 0.5]), 0, 1)

    def paint(mask, colour):
        img[mask] = colour

    head = (u / (p.face_w * 1.08)) ** 2 + ((v + 0.03) / (p.face_h * 1.06)) ** 2 < 1
    paint(head & (v < p.hair_line + 0.1), p.hair)
    face = (u / p.face_w) ** 2 + (v / p.face_h) ** 2 < 1
    paint(face & (v >= p.hair_line + 0.03), p.skin)
    for side in (-1, 1):
        ex = side * p.eye_sep / 2
        brow = (np.abs(u - ex) < p.eye_r * 1.3) & (np.abs(v - (p.eye_y - p.eye_r * 1.8 + side * p.brow_tilt * (u - ex))) < 0.012)
        paint(brow & face, p.hair)
        eye = (u - ex) ** 2 + (v - p.eye_y) ** 2 < p.eye_r**2
        paint(eye, (0.95, 0.95, 0.95))
        paint((u - ex) ** 2 + (v - p.eye_y) ** 2 < (0.55 * p.eye_r) ** 2, p.iris)
    nose = (np.abs(u) < 0.018) & (v > p.eye_y + 0.02) & (v < p.eye_y + 0.02 + p.nose_len)
    paint(nose, np.asarray(p.skin) * 0.7)
    mouth = (u / (p.mouth_w / 2)) ** 2 + ((v - p.mouth_y) / p.mouth_h) ** 2 < 1
    paint(mouth, p.lip)

    if supersample > 1:
        img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    if k > 0:
        img = img * (1.0 + k * rng.uniform(-0.15, 0.15)) + k * rng.normal(0, 0.025, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def make_prior_images(n: int, size: int, seed: int, groups: tuple[int, ...] = (1, 2, 3, 4)) -> np.ndarray:
    """``n`` unlabeled images, each of a fresh random identity from ``groups``."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3), np.uint8)
    for i in range(n):
        g = int(groups[rng.integers(len(groups))])
        out[i] = render(random_identity(rng, g), size, rng)
    return out


@dataclasses.dataclass
class ToyIdentitySet:
    images: np.ndarray  # N x S x S x 3 uint8
    labels: np.ndarray  # identity index per image, 0..P-1
    groups: np.ndarray  # group id per identity, 1..4
    params: list[FaceParams]


def make_identity_images(n_people: int, per_person: int, size: int, seed: int, groups: tuple[int, ...] = (1, 2, 3, 4)) -> ToyIdentitySet:
    """Labeled set with identities balanced over ``groups`` (round robin)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n_people * per_person, size, size, 3), np.uint8)
    labels = np.repeat(np.arange(n_people), per_person)
    person_groups = np.array([groups[i % len(groups)] for i in range(n_people)])
    params = []
    for pid in range(n_people):
        p = random_identity(rng, int(person_groups[pid]))
        params.append(p)
        for j in range(per_person):
            images[pid * per_person + j] = render(p, size, rng)
    return ToyIdentitySet(images, labels, person_groups, params)


def skin_group_classifier(image: np.ndarray) -> int:
    """Nearest base skin tone of the image centre; a stand-in group classifier."""
    h, w = image.shape[:2]
    patch = image[int(h * 0.45): int(h * 0.6), int(w * 0.3): int(w * 0.45)].reshape(-1, 3) / 255.0
    colour = np.median(patch, axis=0)
    dists = {g: float(np.sum((colour - np.array(c)) ** 2)) for g, c in GROUP_SKIN.items()}
    return min(dists, key=dists.get)
