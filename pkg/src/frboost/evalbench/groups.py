"""Auxiliary demographic-group head on top of the recognition trunk, used to vote in consensus assignment."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from frboost.checkpoint import Checkpoint
from frboost.facerec.backbone import Backbone, images_for_backbone


@torch.no_grad()
def trunk_descriptor(backbone: Backbone, images, batch_size: int = 256) -> torch.Tensor:
    """Spatially pooled feature maps of every trunk stage, concatenated.

    Early stages keep colour and tone statistics that the identity embedding
    is trained to ignore, so the head reads these rather than the embedding.
    """
    was_training = backbone.training
    backbone.eval()
    x = images_for_backbone(images, backbone.trunk_config.input_size)
    out = []
    for i in range(0, len(x), batch_size):
        maps = backbone.features(x[i: i + batch_size])
        out.append(torch.cat([m.mean(dim=(2, 3)) for m in maps], dim=1))
    backbone.train(was_training)
    return torch.cat(out)


class GroupClassifier:
    """Linear softmax head over standardised trunk descriptors.

    Calling it on one H x W x 3 uint8 image returns a group id from
    ``group_ids``; this is the classifier interface :func:`consensus_group` expects.
    """

    def __init__(self, backbone: Backbone, head: nn.Linear, group_ids, mean: torch.Tensor, std: torch.Tensor):
        self.backbone = backbone.eval()
        self.head = head.eval()
        self.group_ids = [int(g) for g in group_ids]
        self.mean, self.std = mean, std

    @torch.no_grad()
    def predict(self, images) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        logits = self.head((trunk_descriptor(self.backbone, images) - self.mean) / self.std)
        return np.asarray(self.group_ids)[logits.argmax(1).numpy()]

    def __call__(self, image) -> int:
        return int(self.predict(image)[0])

    def checkpoint(self) -> Checkpoint:
        tensors = {"head": self.head.state_dict(), "norm": {"mean": self.mean, "std": self.std}}
        return Checkpoint("classifier", tensors, {}, 0, None, {"group_ids": self.group_ids})


def train_group_classifier(backbone: Backbone, dataset, epochs: int = 200, lr: float = 0.05, seed: int = 0) -> GroupClassifier:
    """Fit the head on ``dataset``'s per-identity group labels (full-batch Adam, trunk frozen)."""
    group_of_image = dataset.groups[dataset.labels]
    group_ids = np.unique(group_of_image)
    if len(group_ids) < 2:
        raise ValueError("need images from at least two groups")
    target = torch.from_numpy(np.searchsorted(group_ids, group_of_image))
    feats = trunk_descriptor(backbone, dataset.images)
    mean, std = feats.mean(0), feats.std(0).clamp_min(1e-6)
    feats = (feats - mean) / std
    torch.manual_seed(seed)
    head = nn.Linear(feats.shape[1], len(group_ids))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        loss = F.cross_entropy(head(feats), target)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return GroupClassifier(backbone, head, group_ids, mean, std)


def load_group_classifier(backbone: Backbone, ckpt: Checkpoint | str) -> GroupClassifier:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    sd = ckpt.tensors["head"]
    head = nn.Linear(sd["weight"].shape[1], sd["weight"].shape[0])
    head.load_state_dict(sd)
    norm = ckpt.tensors["norm"]
    return GroupClassifier(backbone, head, ckpt.extra["group_ids"], norm["mean"], norm["std"])
