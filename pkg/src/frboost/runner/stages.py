"""Pipeline stages, their prerequisites, run records and the per-directory lock."""
from __future__ import annotations

import contextlib
import json
import os
import subprocess
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from frboost import toydata
from frboost.checkpoint import Checkpoint, JsonlLogger, state_hash
from frboost.encoder.autoencoder import train_autoencoder
from frboost.encoder.features import RandomFeaturePyramid, extract_features, fid_from_features
from frboost.encoder.train import load_encoder, train_encoder
from frboost.evalbench.consensus import assign_groups
from frboost.evalbench.groups import train_group_classifier
from frboost.evalbench.protocols import PairProtocol, ProtocolError, build_rbweb_protocol, build_rfw_style_protocol
from frboost.evalbench.report import VerificationReport, evaluate
from frboost.evalbench.scoring import EmbeddingTable, backbone_embedder, embed_images
from frboost.facerec.backbone import Backbone, load_backbone, transfer_weights
from frboost.facerec.data import IdentityDataset, subsample_identities
from frboost.facerec.finetune import finetune
from frboost.facerec.interp import InterpolationPool, build_interpolation_pool
from frboost.gan.train import load_generator, sample_faces, train_gan
from frboost.gan.networks import tensor_to_images
from frboost.prior_data import PriorDataset, StubDetector, build_prior_dataset, filter_by_group, read_rgb, subsample
from frboost.runner.config import ExperimentConfig, config_hash, derive_seed

STAGE_NAMES = (
    "prep", "train-gan", "train-encoder", "pretrain-ae", "pretrain-vae", "augment-interp",
    "train-facerec", "build-pairs", "embed", "evaluate", "fid",
)


class PrerequisiteError(RuntimeError):
    def __init__(self, stage: str, needs: str, path: Path):
        super().__init__(f"stage {stage!r} needs the output of {needs!r} (missing {path})")
        self.stage, self.needs, self.path = stage, needs, path


class LockError(RuntimeError):
    pass


class Layout:
    """Artifact paths inside one experiment directory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root).resolve()

    prior = property(lambda self: self.root / "prior")
    labeled = property(lambda self: self.root / "labeled" / "identities.csv")
    test = property(lambda self: self.root / "test" / "identities.csv")
    gan = property(lambda self: self.root / "gan" / "gan.pt")
    encoder = property(lambda self: self.root / "encoder" / "encoder.pt")
    ae = property(lambda self: self.root / "ae" / "ae.pt")
    vae = property(lambda self: self.root / "vae" / "vae.pt")
    interp = property(lambda self: self.root / "interp" / "pool.npz")
    facerec = property(lambda self: self.root / "facerec" / "facerec.pt")
    pairs = property(lambda self: self.root / "pairs")
    report = property(lambda self: self.root / "reports" / "verification")
    fid = property(lambda self: self.root / "fid" / "fid.json")
    classifier = property(lambda self: self.root / "classifier" / "groups.pt")
    runs = property(lambda self: self.root / "runs.jsonl")
    lock = property(lambda self: self.root / ".lock")

    def cache_root(self) -> Path:
        return Path(os.environ.get("FRBOOST_CACHE") or self.root / "cache")


@contextlib.contextmanager
def directory_lock(path: Path):
    """One stage at a time per experiment directory."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{path} exists: another stage is running in {path.parent} (remove the file if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


def build_id() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def _require(stage: str, needs: str, path: Path) -> Path:
    if not path.exists():
        raise PrerequisiteError(stage, needs, path)
    return path


# ---------------------------------------------------------------- data helpers


def _toy_identities(n_people, per_person, size, seed) -> IdentityDataset:
    t = toydata.make_identity_images(n_people, per_person, size, seed)
    return IdentityDataset(t.images, t.labels, [f"p{i:05d}" for i in range(n_people)], t.groups)


def _load_identities(spec: str) -> IdentityDataset:
    p = Path(spec)
    return IdentityDataset.from_csv(p) if p.suffix == ".csv" else IdentityDataset.from_directory(p)


def _load_prior(cfg: ExperimentConfig, lay: Layout, stage: str) -> PriorDataset:
    ds = PriorDataset.open(_require(stage, "prep", lay.prior / "manifest.csv").parent)
    if cfg.data.prior_group is not None:
        ds = filter_by_group(ds, toydata.skin_group_classifier, cfg.data.prior_group)
    if cfg.data.prior_fraction < 1:
        ds = subsample(ds, cfg.data.prior_fraction, derive_seed(cfg.seed, "prior-subsample"))
    return ds


# ---------------------------------------------------------------- stages


def stage_prep(cfg: ExperimentConfig, lay: Layout) -> list[Path]:
    res = cfg.gan.resolution
    if cfg.data.prior == "toy":
        imgs = toydata.make_prior_images(cfg.data.toy_prior_images, res, derive_seed(cfg.seed, "toy-prior"))
        prior = PriorDataset.from_arrays(imgs, lay.prior, source="toy")
    else:
        # no face detector ships with the package; frames are assumed to be pre-cropped faces
        prior = build_prior_dataset(cfg.data.prior, StubDetector(), cfg.ingest, lay.prior)
    out = [prior.write_manifest()]
    for name, spec, people, per, target in (
        ("labeled", cfg.data.labeled, cfg.data.toy_people, cfg.data.toy_images_per_person, lay.labeled),
        ("test", cfg.data.test, cfg.data.toy_test_people, cfg.data.toy_test_images_per_person, lay.test),
    ):
        ds = _toy_identities(people, per, res, derive_seed(cfg.seed, f"toy-{name}")) if spec == "toy" else _load_identities(spec)
        out.append(ds.write_csv(target.parent))
    return out


def stage_train_gan(cfg, lay):
    prior = _load_prior(cfg, lay, "train-gan")
    train_gan(prior, cfg.gan, derive_seed(cfg.seed, "gan"), lay.gan.parent)
    return [lay.gan, lay.gan.parent / "gan_log.jsonl"]


def stage_train_encoder(cfg, lay):
    gan = _require("train-encoder", "train-gan", lay.gan)
    prior = _load_prior(cfg, lay, "train-encoder")
    train_encoder(prior, Checkpoint.load(gan), cfg.encoder, derive_seed(cfg.seed, "encoder"), lay.encoder.parent)
    return [lay.encoder, lay.encoder.parent / "encoder_log.jsonl"]


def _stage_autoencoder(variational: bool):
    def run(cfg, lay):
        target = lay.vae if variational else lay.ae
        prior = _load_prior(cfg, lay, f"pretrain-{target.stem}")
        train_autoencoder(prior, variational, cfg.encoder, derive_seed(cfg.seed, target.stem), cfg.facerec.ae_latent_dim,
                          cfg.facerec.vae_beta, target.parent)
        return [target]
    return run


def _labeled_subset(cfg, lay) -> IdentityDataset:
    ds = IdentityDataset.from_csv(_require("train-facerec", "prep", lay.labeled))
    return subsample_identities(ds, cfg.facerec.labeled_fraction, derive_seed(cfg.seed, "labeled-subsample"))


def stage_augment_interp(cfg, lay):
    enc = load_encoder(_require("augment-interp", "train-encoder", lay.encoder))
    gen = load_generator(_require("augment-interp", "train-gan", lay.gan))
    ds = _labeled_subset(cfg, lay)
    n = cfg.facerec.interpolation_pool or len(ds)
    pool = build_interpolation_pool(ds, enc, gen, n, derive_seed(cfg.seed, "interp"))
    lay.interp.parent.mkdir(parents=True, exist_ok=True)
    np.savez(lay.interp, images=pool.images, index_a=pool.index_a, index_b=pool.index_b, lam=pool.lam)
    return [lay.interp]


def _init_backbone(cfg, lay) -> Backbone:
    seed = derive_seed(cfg.seed, "facerec-init")
    kw = dict(emb_dim=cfg.facerec.emb_dim, seed=seed, conv_dropout=cfg.finetune.conv_dropout, output_dropout=cfg.facerec.output_dropout)
    if cfg.facerec.init == "scratch":
        return Backbone.scratch(cfg.encoder.trunk_config(), cfg.facerec.emb_dim, seed,
                                conv_dropout=cfg.finetune.conv_dropout, output_dropout=cfg.facerec.output_dropout)
    needs = {"encoder": ("train-encoder", lay.encoder), "ae": ("pretrain-ae", lay.ae), "vae": ("pretrain-vae", lay.vae)}
    stage, path = needs[cfg.facerec.init]
    return transfer_weights(_require("train-facerec", stage, path), **kw)


def stage_train_facerec(cfg, lay):
    ds = _labeled_subset(cfg, lay)
    init = _init_backbone(cfg, lay)
    pool = None
    if cfg.facerec.interpolation_pool:
        z = np.load(_require("train-facerec", "augment-interp", lay.interp))
        pool = InterpolationPool(z["images"], z["index_a"], z["index_b"], z["lam"])
    finetune(ds, init, cfg.finetune, cfg.facerec.loss_kind, pool, derive_seed(cfg.seed, "facerec"), lay.facerec.parent)
    return [lay.facerec, lay.facerec.parent / "facerec_log.jsonl"]


def _grouped_test_people(test: IdentityDataset) -> dict:
    grouped: dict = {}
    for lab, path in zip(test.labels, test.paths):
        grouped.setdefault(int(test.groups[lab]), {}).setdefault(test.identities[lab], []).append(path)
    return grouped


def _consensus_grouped_people(cfg, lay, test: IdentityDataset) -> dict:
    """Group unlabeled test people by consensus voting of a head trained on the labeled set's groups."""
    backbone = load_backbone(_require("build-pairs", "train-facerec", lay.facerec))
    labeled = IdentityDataset.from_csv(_require("build-pairs", "prep", lay.labeled))
    clf = train_group_classifier(backbone, labeled, seed=derive_seed(cfg.seed, "group-head"))
    clf.checkpoint().save(lay.classifier)
    people = {test.identities[lab]: [] for lab in range(test.n_people)}
    for lab, path in zip(test.labels, test.paths):
        people[test.identities[lab]].append(path)
    assigned = assign_groups(people, lambda path: clf(read_rgb(path)), derive_seed(cfg.seed, "consensus"))
    grouped: dict = {}
    for person, g in assigned.items():
        grouped.setdefault(g, {})[person] = people[person]
    return grouped


def stage_build_pairs(cfg, lay):
    test = IdentityDataset.from_csv(_require("build-pairs", "prep", lay.test))
    # group id 0 means unknown: fall back to consensus assignment
    grouped = _consensus_grouped_people(cfg, lay, test) if not test.groups.any() else _grouped_test_people(test)
    if not grouped:
        raise ProtocolError("all", "consensus assignment left no test person with a group (people need >= 14 photos)")
    seed = derive_seed(cfg.seed, "pairs")
    p = cfg.protocol
    if p.kind == "rbweb":
        proto = build_rbweb_protocol(grouped, p.n_people_per_group, p.pos_per_person, seed)
    else:
        proto = build_rfw_style_protocol(grouped, p.n_pairs, None, seed)
    proto.write(lay.pairs)
    return sorted(p for p in lay.pairs.iterdir())


def _embedding_cache_path(lay, backbone_ck: Checkpoint, ids: list[str]) -> Path:
    key = config_hash({"backbone": state_hash(backbone_ck.tensors["backbone"]), "ids": ids})[:24]
    return lay.cache_root() / "embeddings" / f"{key}.emb"


def _embedding_table(lay, proto: PairProtocol) -> tuple[EmbeddingTable, Path]:
    ck = Checkpoint.load(lay.facerec)
    ids = [str(i) for i in proto.image_ids()]
    path = _embedding_cache_path(lay, ck, ids)
    if path.exists():
        return EmbeddingTable.load(path), path
    table = embed_images(backbone_embedder(load_backbone(ck)), ids)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    return table, path


def stage_embed(cfg, lay):
    _require("embed", "train-facerec", lay.facerec)
    proto = PairProtocol.read(_require("embed", "build-pairs", lay.pairs / "pairs.tsv").parent)
    _, path = _embedding_table(lay, proto)
    return [path]


def stage_evaluate(cfg, lay):
    _require("evaluate", "train-facerec", lay.facerec)
    proto = PairProtocol.read(_require("evaluate", "build-pairs", lay.pairs / "pairs.tsv").parent)
    table, _ = _embedding_table(lay, proto)
    p = cfg.protocol
    rep = evaluate(None, proto, p.fpr_targets, folds=p.folds, seed=derive_seed(cfg.seed, "folds"),
                   accuracy=p.accuracy, sweep=p.sweep, table=table)
    return list(rep.save(lay.report))


def stage_fid(cfg, lay):
    gan = _require("fid", "train-gan", lay.gan)
    prior = _load_prior(cfg, lay, "fid")
    n = min(cfg.protocol.fid_samples, len(prior))
    rng = np.random.default_rng(derive_seed(cfg.seed, "fid-real"))
    real = np.stack([prior.load_image(int(i)) for i in np.sort(rng.choice(len(prior), n, replace=False))])
    net = RandomFeaturePyramid()
    fake = tensor_to_images(sample_faces(Checkpoint.load(gan), n, derive_seed(cfg.seed, "fid-fake")))
    value = fid_from_features(extract_features(net, real), extract_features(net, fake))
    lay.fid.parent.mkdir(parents=True, exist_ok=True)
    lay.fid.write_text(json.dumps({"fid": value, "samples": n, "feature_net": "random-pyramid"}, indent=2) + "\n")
    return [lay.fid]


STAGES = {
    "prep": stage_prep,
    "train-gan": stage_train_gan,
    "train-encoder": stage_train_encoder,
    "pretrain-ae": _stage_autoencoder(False),
    "pretrain-vae": _stage_autoencoder(True),
    "augment-interp": stage_augment_interp,
    "train-facerec": stage_train_facerec,
    "build-pairs": stage_build_pairs,
    "embed": stage_embed,
    "evaluate": stage_evaluate,
    "fid": stage_fid,
}


def run_stage(name: str, config: ExperimentConfig) -> list[Path]:
    """Run one stage under the directory lock and append a run record."""
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}; expected one of {STAGE_NAMES}")
    config.validate()
    lay = Layout(config.out_dir)
    torch.manual_seed(derive_seed(config.seed, name))
    with directory_lock(lay.lock):
        config.save(lay.root / "config.json")
        start = time.perf_counter()
        artifacts = STAGES[name](config, lay)
        wall = time.perf_counter() - start
        JsonlLogger(lay.runs).log(
            stage=name, config_hash=config.hash(), build=build_id(), seed=config.seed,
            wall_clock_s=round(wall, 3), artifacts=[str(a) for a in artifacts],
        )
    return artifacts


def run_pipeline(config: ExperimentConfig, stages=None) -> VerificationReport:
    """Run stages in dependency order and return the verification report."""
    default = ["prep", "train-gan", "train-encoder", "train-facerec", "build-pairs", "embed", "evaluate"]
    if config.facerec.init in ("ae", "vae"):
        default[2] = f"pretrain-{config.facerec.init}"
    elif config.facerec.init == "scratch":
        default.remove("train-encoder")
        default.remove("train-gan")
    if config.facerec.interpolation_pool:
        default.insert(default.index("train-facerec"), "augment-interp")
        if "train-encoder" not in default:
            default[1:1] = ["train-gan", "train-encoder"]
    for s in stages or default:
        run_stage(s, config)
    lay = Layout(config.out_dir)
    return load_report(lay.report.with_suffix(".json"))


def load_report(path: str | os.PathLike) -> VerificationReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    per_group = {(int(g) if g.lstrip("-").isdigit() else g): m for g, m in d["per_group"].items()}
    return VerificationReport(per_group, d["avg"], d["std"], d.get("modes", {}), d.get("flags", {}))
