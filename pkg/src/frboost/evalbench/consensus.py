"""Assign a person to a demographic group only when a sample of their photos agrees."""
from __future__ import annotations

import hashlib
from collections import Counter
from collections.abc import Callable, Sequence
from fractions import Fraction

import numpy as np

UNDECIDED = None


def _image_key(image) -> bytes:
    if isinstance(image, (str, bytes)):
        return image.encode("utf-8") if isinstance(image, str) else image
    if isinstance(image, np.ndarray):
        return image.tobytes() + str(image.shape).encode()
    return repr(image).encode("utf-8")


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63))
    return int(rng)


def sample_photos(person_images: Sequence, k: int, seed: int) -> list[int]:
    """Indices of ``k`` photos chosen by a seeded hash ranking.

    Each photo's rank depends only on its own content and the seed, so adding
    photos never reshuffles the relative order of the existing ones.
    """
    salt = str(seed).encode() + b"\0"
    keys = [(hashlib.sha256(salt + _image_key(img)).digest(), i) for i, img in enumerate(person_images)]
    return [i for _, i in sorted(keys)[:k]]


def consensus_group(
    person_images: Sequence,
    classifier: Callable,
    rng=0,
    min_photos: int = 14,
    max_sampled: int = 20,
    agreement: float | Fraction = Fraction(4, 5),
):
    """Group id voted by at least ``agreement`` of up to ``max_sampled`` photos, else ``UNDECIDED``.

    People with fewer than ``min_photos`` photos are always undecided.
    ``rng`` is an integer seed or a numpy Generator (one draw is consumed).
    """
    if len(person_images) < min_photos:
        return UNDECIDED
    chosen = sample_photos(person_images, min(max_sampled, len(person_images)), _seed_of(rng))
    votes = Counter(classifier(person_images[i]) for i in chosen)
    group, count = votes.most_common(1)[0]  # an 80% majority is unique
    if Fraction(count, len(chosen)) >= Fraction(agreement).limit_denominator(10**6):
        return group
    return UNDECIDED


def assign_groups(people: dict, classifier: Callable, seed: int = 0, **kwargs) -> dict:
    """Apply :func:`consensus_group` to every person; undecided people are dropped."""
    out = {}
    for person, images in people.items():
        g = consensus_group(images, classifier, seed, **kwargs)
        if g is not UNDECIDED:
            out[person] = g
    return out
