"""Experiment configuration: one JSON file, preset defaults, stable hashing, derived seeds."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

from frboost.encoder.train import EncoderConfig
from frboost.facerec.finetune import FinetuneSchedule
from frboost.gan.train import GanConfig
from frboost.prior_data import IngestConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    """Where the datasets come from.

    ``"toy"`` renders procedural faces; otherwise ``prior`` is a media
    manifest (one video or frame folder per line) and ``labeled``/``test``
    are identity directories or CSV manifests.
    """

    prior: str = "toy"
    labeled: str = "toy"
    test: str = "toy"
    toy_prior_images: int = 10_000
    toy_people: int = 2000
    toy_images_per_person: int = 6
    toy_test_people: int = 200
    toy_test_images_per_person: int = 10
    prior_fraction: float = 1.0
    prior_group: int | None = None  # keep only prior images the group classifier assigns here


@dataclasses.dataclass
class FacerecConfig:
    init: str = "encoder"  # scratch | encoder | ae | vae
    loss_kind: str = "arcface"
    emb_dim: int = 512
    labeled_fraction: float = 1.0
    output_dropout: float = 0.5
    interpolation_pool: int = 0  # number of mixed samples; 0 disables the augmentation
    ae_latent_dim: int = 512
    vae_beta: float = 1.0


@dataclasses.dataclass
class ProtocolConfig:
    kind: str = "rfw"  # rfw | rbweb
    n_pairs: int = 3000
    n_people_per_group: int = 18000
    pos_per_person: int = 5
    fpr_targets: tuple = (1e-3, 1e-4)
    folds: int = 10
    accuracy: str = "cv"  # cv | best
    sweep: bool = False
    fid_samples: int = 100_000


SECTIONS = {
    "ingest": IngestConfig,
    "gan": GanConfig,
    "encoder": EncoderConfig,
    "finetune": FinetuneSchedule,
    "data": DataConfig,
    "facerec": FacerecConfig,
    "protocol": ProtocolConfig,
}


def _preset_sections(preset: str) -> dict:
    if preset == "paper":
        return {name: cls() for name, cls in SECTIONS.items()}
    if preset == "desk":
        return {
            "ingest": IngestConfig(),
            "gan": GanConfig.desk(),
            "encoder": EncoderConfig.desk(),
            "finetune": FinetuneSchedule.desk(epochs=12, margin_s=32.0),
            "data": DataConfig(),
            "facerec": FacerecConfig(emb_dim=128, ae_latent_dim=64),
            "protocol": ProtocolConfig(n_pairs=300, n_people_per_group=40, fid_samples=2000),
        }
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")


@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    scale_preset: str = "desk"
    out_dir: str = "runs/default"
    ingest: IngestConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["ingest"])
    gan: GanConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["gan"])
    encoder: EncoderConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["encoder"])
    finetune: FinetuneSchedule = dataclasses.field(default_factory=lambda: _preset_sections("desk")["finetune"])
    data: DataConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["data"])
    facerec: FacerecConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["facerec"])
    protocol: ProtocolConfig = dataclasses.field(default_factory=lambda: _preset_sections("desk")["protocol"])

    @classmethod
    def preset(cls, name: str = "desk", **top) -> "ExperimentConfig":
        return cls(scale_preset=name, **_preset_sections(name), **top)

    @classmethod
    def from_dict(cls, d: dict, preset: str | None = None) -> "ExperimentConfig":
        """Preset defaults overlaid with the file's values (section by section)."""
        d = dict(d)
        preset = preset or d.get("scale_preset", "desk")
        sections = _preset_sections(preset)
        unknown = set(d) - set(SECTIONS) - {"seed", "scale_preset", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, cls_ in SECTIONS.items():
            values = d.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be an object")
            fields = {f.name for f in dataclasses.fields(cls_)}
            bad = set(values) - fields
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            try:
                sections[name] = dataclasses.replace(sections[name], **values)
            except (TypeError, ValueError) as err:
                raise ConfigError(f"section {name!r}: {err}") from None
        try:
            return cls(seed=int(d.get("seed", 0)), scale_preset=preset, out_dir=str(d.get("out_dir", "runs/default")), **sections)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def load(cls, path: str | os.PathLike, preset: str | None = None) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, preset)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def semantic_dict(self) -> dict:
        """Everything that can change a result (the output directory cannot)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def hash(self) -> str:
        return config_hash(self.semantic_dict())

    def validate(self) -> None:
        if self.facerec.init not in ("scratch", "encoder", "ae", "vae"):
            raise ConfigError(f"facerec.init must be scratch/encoder/ae/vae, got {self.facerec.init!r}")
        if self.facerec.loss_kind not in ("arcface", "sphereface"):
            raise ConfigError(f"facerec.loss_kind must be arcface or sphereface, got {self.facerec.loss_kind!r}")
        if not 0 < self.facerec.labeled_fraction <= 1 or not 0 < self.data.prior_fraction <= 1:
            raise ConfigError("fractions must lie in (0, 1]")
        if self.protocol.kind not in ("rfw", "rbweb"):
            raise ConfigError(f"protocol.kind must be rfw or rbweb, got {self.protocol.kind!r}")
        if self.encoder.input_size > self.gan.resolution:
            raise ConfigError("encoder.input_size must not exceed gan.resolution")
        try:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise ConfigError(f"cannot create out_dir {self.out_dir}: {err}") from None


def config_hash(d: dict) -> str:
    """sha256 of the canonical JSON form; key order does not matter."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def derive_seed(master: int, label: str) -> int:
    """Named sub-seed: stable, independent of call order."""
    return int.from_bytes(hashlib.sha256(f"{master}/{label}".encode()).digest()[:4], "little")
