"""Labeled identity datasets, identity subsampling and training-time augmentation."""
from __future__ import annotations

import csv
import dataclasses
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from frboost.prior_data import IMAGE_EXTENSIONS, read_rgb


@dataclasses.dataclass
class IdentityDataset:
    """Face images grouped by person.

    ``labels`` index into ``identities`` (0..P-1); ``groups`` holds one group
    id per identity (0 when unknown). ``paths`` is kept when the images were
    loaded from disk.
    """

    images: np.ndarray
    labels: np.ndarray
    identities: list[str]
    groups: np.ndarray
    paths: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.groups) != len(self.identities):
            raise ValueError("one group id per identity is required")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_people(self) -> int:
        return len(self.identities)

    def person_indices(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        splits = np.flatnonzero(np.diff(self.labels[order])) + 1
        return {int(self.labels[idx[0]]): idx for idx in np.split(order, splits) if len(idx)}

    def select_people(self, people: np.ndarray) -> "IdentityDataset":
        """Keep whole identities, relabelled 0..k-1 in the given order."""
        people = np.asarray(people, dtype=np.int64)
        remap = np.full(self.n_people, -1, dtype=np.int64)
        remap[people] = np.arange(len(people))
        keep = np.flatnonzero(remap[self.labels] >= 0)
        return IdentityDataset(
            self.images[keep],
            remap[self.labels[keep]],
            [self.identities[p] for p in people],
            self.groups[people],
            [self.paths[i] for i in keep] if self.paths is not None else None,
        )

    @classmethod
    def from_arrays(cls, images, labels, groups=None) -> "IdentityDataset":
        labels = np.asarray(labels)
        n = int(labels.max()) + 1 if len(labels) else 0
        groups = np.zeros(n, np.int64) if groups is None else np.asarray(groups)
        return cls(np.asarray(images), labels, [str(i) for i in range(n)], groups)

    @classmethod
    def from_directory(cls, root: str | os.PathLike) -> "IdentityDataset":
        """One sub-directory per identity, images inside."""
        root = Path(root)
        images, labels, paths, ids = [], [], [], []
        for pid, d in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
            ids.append(d.name)
            for f in sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS):
                images.append(read_rgb(f))
                labels.append(pid)
                paths.append(str(f))
        return cls(np.stack(images) if images else np.zeros((0, 1, 1, 3), np.uint8), labels, ids, np.zeros(len(ids), np.int64), paths)

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "IdentityDataset":
        """CSV manifest with header ``image_path,identity_id,group_id``; paths relative to the CSV."""
        path = Path(path)
        images, labels, paths = [], [], []
        ids: dict[str, int] = {}
        groups: list[int] = []
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["image_path", "identity_id", "group_id"]:
                raise ValueError(f"bad identity manifest header {reader.fieldnames}")
            for row in reader:
                pid = ids.setdefault(row["identity_id"], len(ids))
                if pid == len(groups):
                    groups.append(int(row["group_id"]))
                p = Path(row["image_path"])
                p = p if p.is_absolute() else path.parent / p
                images.append(read_rgb(p))
                labels.append(pid)
                paths.append(str(p))
        return cls(np.stack(images), labels, list(ids), np.asarray(groups), paths)

    def write_csv(self, root: str | os.PathLike) -> Path:
        """Write images under ``root/<identity>/`` and a manifest ``root/identities.csv``."""
        from frboost.prior_data import write_rgb

        root = Path(root)
        counters: dict[int, int] = {}
        rows = []
        for img, lab in zip(self.images, self.labels):
            k = counters.get(int(lab), 0)
            counters[int(lab)] = k + 1
            rel = Path(self.identities[lab]) / f"{k:05d}.png"
            write_rgb(root / rel, img)
            rows.append([str(rel), self.identities[lab], str(int(self.groups[lab]))])
        out = root / "identities.csv"
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_path", "identity_id", "group_id"])
            w.writerows(rows)
        return out


def subsample_identities(dataset: IdentityDataset, fraction: float, seed: int) -> IdentityDataset:
    """Keep round(fraction * people) whole identities: a prefix of a seeded permutation."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    k = max(int(round(fraction * dataset.n_people)), 1)
    perm = np.random.default_rng(seed).permutation(dataset.n_people)
    return dataset.select_people(np.sort(perm[:k]))


def augment_batch(images: torch.Tensor, rng: np.random.Generator, resize_to: int = 128, crop: int = 112, flip_p: float = 0.5) -> torch.Tensor:
    """Resize to ``resize_to``, take a random ``crop`` window, flip horizontally with prob ``flip_p``.

    ``images`` is N x 3 x H x W (or a single 3 x H x W image).
    """
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.shape[-1] != resize_to or images.shape[-2] != resize_to:
        images = F.interpolate(images, size=(resize_to, resize_to), mode="bilinear", align_corners=False)
    n = images.shape[0]
    ys = rng.integers(0, resize_to - crop + 1, n)
    xs = rng.integers(0, resize_to - crop + 1, n)
    flips = rng.random(n) < flip_p
    out = torch.stack([images[i, :, ys[i]: ys[i] + crop, xs[i]: xs[i] + crop] for i in range(n)])
    if flips.any():
        idx = torch.from_numpy(np.flatnonzero(flips))
        out[idx] = out[idx].flip(-1)
    return out[0] if single else out
