"""Checkpoint container and JSON-lines logging shared by every training stage.

A checkpoint is two files: ``<name>.pt`` holding named tensors and
``<name>.json`` holding the sidecar ``{stage, config, samples_seen, rng_state, ...}``.
Both are written to a temporary name first and renamed into place.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import torch

STAGES = ("gan", "encoder", "ae", "vae", "facerec", "classifier")


class NumericalAbort(RuntimeError):
    """Raised when a loss turns non-finite. Carries the diagnostic checkpoint path."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    if hasattr(obj, "item") and callable(obj.item):
        return obj.item()
    return obj


def _atomic_write(path: Path, write_fn) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@dataclasses.dataclass
class Checkpoint:
    """Named parameter groups plus metadata.

    ``tensors`` maps a group name (``"generator"``, ``"discriminator"``,
    ``"encoder"``, ``"backbone"``, ...) to a state dict.
    """

    stage: str
    tensors: dict[str, dict[str, torch.Tensor]]
    config: dict = dataclasses.field(default_factory=dict)
    samples_seen: int = 0
    rng_state: Any = None
    extra: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown checkpoint stage {self.stage!r}; expected one of {STAGES}")

    def sidecar(self) -> dict:
        return {
            "stage": self.stage,
            "config": _jsonable(self.config),
            "samples_seen": int(self.samples_seen),
            "rng_state": _jsonable(self.rng_state),
            **_jsonable(self.extra),
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        if path.suffix != ".pt":
            path = path.with_suffix(".pt")
        tensors = {g: {k: v.detach().cpu().clone() for k, v in sd.items()} for g, sd in self.tensors.items()}
        _atomic_write(path, lambda tmp: torch.save(tensors, tmp))
        side = json.dumps(self.sidecar(), indent=2, sort_keys=True)
        _atomic_write(path.with_suffix(".json"), lambda tmp: Path(tmp).write_text(side))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        path = Path(path)
        if path.suffix != ".pt":
            path = path.with_suffix(".pt")
        tensors = torch.load(path, map_location="cpu", weights_only=True)
        side = json.loads(path.with_suffix(".json").read_text())
        stage = side.pop("stage")
        config = side.pop("config", {})
        samples_seen = side.pop("samples_seen", 0)
        rng_state = side.pop("rng_state", None)
        return cls(stage, tensors, config, samples_seen, rng_state, side)


def state_hash(state_dict: dict[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names and raw bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class JsonlLogger:
    """Append-only JSON-lines log. ``path=None`` keeps records in memory only."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, **record) -> dict:
        record = _jsonable(record)
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
