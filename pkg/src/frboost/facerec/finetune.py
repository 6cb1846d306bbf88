"""Stage 3: fine-tune the recognition backbone with an angular-margin head."""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from frboost.checkpoint import Checkpoint, JsonlLogger, NumericalAbort
from frboost.encoder.train import resize_images
from frboost.facerec.backbone import Backbone
from frboost.facerec.data import IdentityDataset, augment_batch
from frboost.facerec.losses import MarginHead
from frboost.gan.networks import images_to_tensor

LOSS_KINDS = ("arcface", "sphereface")


@dataclasses.dataclass
class FinetuneSchedule:
    epochs: int = 100
    freeze_epochs: int = 3
    momentum: float = 0.9
    weight_decay: float = 2e-3
    lr0: float = 0.03
    lr_decay_factor: float = 1.5
    lr_decay_every: int = 5
    conv_dropout: float = 0.15
    margin_s: float = 64.0
    margin_m: float = 0.5
    sphereface_m: float = 4
    batch_size: int = 256
    # augmentation: resize to round(input * 128 / 112), crop back to input size
    resize_ratio: float = 128 / 112
    flip_p: float = 0.5

    def __post_init__(self):
        for name in ("epochs", "momentum", "weight_decay", "lr0", "lr_decay_factor", "lr_decay_every", "margin_s", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.freeze_epochs < self.epochs:
            raise ValueError("freeze_epochs must lie in [0, epochs)")
        if not 0 <= self.conv_dropout < 1:
            raise ValueError("conv_dropout must lie in [0, 1)")
        if not 0 <= self.margin_m < math.pi / 2:
            raise ValueError("margin_m must lie in [0, pi/2)")

    @classmethod
    def desk(cls, **overrides) -> "FinetuneSchedule":
        base = dict(epochs=30, batch_size=32)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if epoch < 1:
            raise ValueError("epochs are counted from 1")
        return self.lr0 / self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)

    def frozen(self, epoch: int, init: str) -> bool:
        """The freeze applies to the first epochs of transferred (non-scratch) backbones."""
        return init != "scratch" and epoch <= self.freeze_epochs


def trainable_names(backbone: Backbone, frozen: bool) -> set[str]:
    names = {n for n, _ in backbone.named_parameters()}
    if not frozen:
        return names
    return {n for n in names if n.startswith(("trunk.input_layer.", "output_layer."))}


def _apply_freeze(backbone: Backbone, frozen: bool) -> None:
    keep = trainable_names(backbone, frozen)
    for name, p in backbone.named_parameters():
        p.requires_grad_(name in keep)
        if name not in keep:
            p.grad = None


def _set_train_mode(backbone: Backbone, frozen: bool) -> None:
    backbone.train()
    if frozen:
        # frozen BatchNorm layers keep their running statistics too
        for name, mod in backbone.named_modules():
            if isinstance(mod, nn.BatchNorm2d) and not name.startswith(("trunk.input_layer", "output_layer")):
                mod.eval()


def _prepare(images: np.ndarray, size: int) -> torch.Tensor:
    return images_to_tensor(resize_images(np.asarray(images), size))


def finetune(
    dataset: IdentityDataset,
    init: Backbone,
    schedule: FinetuneSchedule | None = None,
    loss_kind: str = "arcface",
    interpolation_pool=None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    logger: JsonlLogger | None = None,
) -> Checkpoint:
    """Train ``init`` in place on ``dataset``; returns a ``facerec`` checkpoint.

    Pool samples (if any) are shuffled together with the real images and
    scored with the soft-target margin loss.
    """
    schedule = schedule or FinetuneSchedule()
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if len(dataset) == 0:
        raise ValueError("finetune needs a non-empty dataset")
    backbone = init
    backbone.trunk.set_dropout(schedule.conv_dropout)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    logger = logger or JsonlLogger(Path(out_dir) / "facerec_log.jsonl" if out_dir else None)

    size = backbone.trunk_config.input_size
    resize_to = int(round(size * schedule.resize_ratio))
    real = _prepare(dataset.images, size)
    labels = torch.from_numpy(dataset.labels)
    n_real = len(real)
    n_pool = len(interpolation_pool) if interpolation_pool is not None else 0
    if n_pool:
        pool = _prepare(interpolation_pool.images, size)
        pool_a = torch.from_numpy(np.asarray(interpolation_pool.index_a, dtype=np.int64))
        pool_b = torch.from_numpy(np.asarray(interpolation_pool.index_b, dtype=np.int64))
        pool_lam = torch.from_numpy(np.asarray(interpolation_pool.lam, dtype=np.float32))

    head = MarginHead(dataset.n_people, backbone.emb_dim, loss_kind, schedule.margin_s, schedule.margin_m, schedule.sphereface_m)
    opt = torch.optim.SGD(list(backbone.parameters()) + list(head.parameters()), lr=schedule.lr0,
                          momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    init_kind = backbone.init_provenance

    def checkpoint(epoch, extra=None):
        tc = backbone.trunk_config
        meta = {
            "init": init_kind, "loss_kind": loss_kind, "epochs_done": epoch, "n_classes": dataset.n_people,
            "emb_dim": backbone.emb_dim, "conv_dropout": schedule.conv_dropout,
            "output_dropout": backbone.output_layer[1].p, "trunk_depth": tc.depth, "trunk_widths": list(tc.widths),
            "trunk_use_se": tc.use_se, "input_size": tc.input_size, "pool_size": n_pool, **(extra or {}),
        }
        return Checkpoint("facerec", {"backbone": backbone.state_dict(), "head": head.state_dict()},
                          dataclasses.asdict(schedule), epoch * (n_real + n_pool), {"seed": seed}, meta)

    history = []
    for epoch in range(1, schedule.epochs + 1):
        frozen = schedule.frozen(epoch, init_kind)
        _apply_freeze(backbone, frozen)
        _set_train_mode(backbone, frozen)
        head.train()
        for g in opt.param_groups:
            g["lr"] = schedule.lr_at(epoch)
        order = rng.permutation(n_real + n_pool)
        total, correct, count = 0.0, 0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start: start + schedule.batch_size]
            ri = torch.from_numpy(idx[idx < n_real])
            pi = torch.from_numpy(idx[idx >= n_real] - n_real)
            x = real[ri] if not len(pi) else torch.cat([real[ri], pool[pi]])
            if len(x) < 2:
                continue  # BatchNorm1d needs more than one sample
            x = augment_batch(x, rng, resize_to, size, schedule.flip_p)
            emb = backbone(x)
            parts = []
            if len(ri):
                parts.append(head(emb[: len(ri)], labels[ri], reduction="none"))
            if len(pi):
                parts.append(head.soft(emb[len(ri):], pool_a[pi], pool_b[pi], pool_lam[pi], reduction="none"))
            loss = torch.cat(parts).mean()
            if not math.isfinite(loss.item()):
                path = str(checkpoint(epoch - 1, {"aborted": True}).save(Path(out_dir) / "facerec_diagnostic")) if out_dir else None
                raise NumericalAbort(f"non-finite fine-tuning loss in epoch {epoch}", path)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
            if len(ri):
                correct += int((head.predict(emb[: len(ri)].detach()) == labels[ri]).sum())
        record = {"epoch": epoch, "lr": schedule.lr_at(epoch), "frozen": frozen,
                  "loss": total / max(count, 1), "train_acc": correct / n_real}
        history.append(record)
        logger.log(**record)

    _apply_freeze(backbone, False)
    backbone.eval()
    ckpt = checkpoint(schedule.epochs, {"history": history})
    if out_dir:
        ckpt.save(Path(out_dir) / "facerec")
    return ckpt
