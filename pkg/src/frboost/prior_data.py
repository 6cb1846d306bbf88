"""Unlabeled prior-dataset construction: frames -> detections -> aligned crops -> shards.

Video decoding goes through OpenCV; folders of pre-extracted frames skip it.
The face detector is an interface (any callable returning
:class:`FaceDetection` lists); :class:`StubDetector` is the deterministic
implementation used for desk runs and tests.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import cv2
import numpy as np
from skimage.transform import SimilarityTransform

log = logging.getLogger(__name__)

# 5-point template for a 112x112 crop: left eye, right eye, nose, left/right mouth corner.
CANONICAL_TEMPLATE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ],
    dtype=np.float64,
)

MANIFEST_HEADER = ["image_id", "source", "timestamp_s", "box_x", "box_y", "box_w", "box_h", "confidence"]
SHARD_SIZE = 10_000
VIDEO_EXTENSIONS = {".mp4", ".avi", ".mkv", ".mov", ".webm", ".m4v"}
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class IngestionError(RuntimeError):
    """A media source could not be read. ``source`` names the offending file."""

    def __init__(self, source: str, reason: str):
        super().__init__(f"cannot ingest {source!r}: {reason}")
        self.source = source
        self.reason = reason


class BuildError(RuntimeError):
    """Some sources failed; the partial dataset was flushed anyway."""

    def __init__(self, dataset: "PriorDataset", failures: list[dict]):
        names = ", ".join(f["source"] for f in failures)
        super().__init__(f"{len(failures)} source(s) failed: {names}")
        self.dataset = dataset
        self.failures = failures


@dataclasses.dataclass(frozen=True)
class IngestConfig:
    frame_period_s: float = 5.0
    max_minutes_per_video: float = 20.0
    min_face_px: int = 100
    detector_confidence: float = 0.9
    target_size: int = 112

    def __post_init__(self):
        if not self.frame_period_s > 0:
            raise ValueError("frame_period_s must be > 0")
        if not self.max_minutes_per_video > 0:
            raise ValueError("max_minutes_per_video must be > 0")
        if self.min_face_px < 1:
            raise ValueError("min_face_px must be >= 1")
        if not 0.0 <= self.detector_confidence <= 1.0:
            raise ValueError("detector_confidence must lie in [0, 1]")
        if self.target_size < 8:
            raise ValueError("target_size must be >= 8")

    @property
    def max_seconds(self) -> float:
        return self.max_minutes_per_video * 60.0


@dataclasses.dataclass(frozen=True)
class FaceDetection:
    box: tuple[float, float, float, float]  # x, y, w, h
    landmarks: np.ndarray  # (5, 2) pixel coordinates
    confidence: float

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.shape != (5, 2):
            raise ValueError(f"landmarks must have shape (5, 2), got {lm.shape}")
        object.__setattr__(self, "landmarks", lm)
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError("box must have positive width and height")

    def inside(self, height: int, width: int) -> bool:
        lm = self.landmarks
        return bool(np.all(lm[:, 0] >= 0) and np.all(lm[:, 0] <= width) and np.all(lm[:, 1] >= 0) and np.all(lm[:, 1] <= height))


@dataclasses.dataclass
class Frame:
    image: np.ndarray  # H x W x 3 uint8 RGB
    timestamp_s: float


@dataclasses.dataclass
class AlignedFace:
    image: np.ndarray
    detection: FaceDetection


class Detector(Protocol):
    def __call__(self, frame: np.ndarray) -> list[FaceDetection]: ...


# -- frame sources ---------------------------------------------------------


def frame_timestamps(duration_s: float, config: IngestConfig) -> list[float]:
    """Sampling instants 0, P, 2P, ... strictly below min(duration, cap)."""
    limit = min(float(duration_s), config.max_seconds)
    if limit <= 0:
        return []
    n = math.ceil(limit / config.frame_period_s)
    # guard float round-off at the boundary
    while n > 0 and (n - 1) * config.frame_period_s >= limit:
        n -= 1
    return [k * config.frame_period_s for k in range(n)]


class ArraySource:
    """In-memory video: a stack of frames at a fixed frame rate."""

    def __init__(self, frames: np.ndarray, fps: float, name: str = "<array>"):
        self.frames = np.asarray(frames)
        self.fps = float(fps)
        self.name = name

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.fps

    def frame_at(self, t: float) -> np.ndarray:
        idx = min(int(round(t * self.fps)), len(self.frames) - 1)
        return self.frames[idx]


class VideoSource:
    """Video file decoded by OpenCV, seeking by timestamp."""

    def __init__(self, path: str | os.PathLike):
        self.name = str(path)
        self._cap = cv2.VideoCapture(self.name)
        if not self._cap.isOpened():
            raise IngestionError(self.name, "video could not be opened")
        fps = self._cap.get(cv2.CAP_PROP_FPS)
        count = self._cap.get(cv2.CAP_PROP_FRAME_COUNT)
        if not fps or fps <= 0 or count < 0:
            raise IngestionError(self.name, "missing frame rate or frame count")
        self.fps = float(fps)
        self._count = int(count)

    @property
    def duration_s(self) -> float:
        return self._count / self.fps

    def frame_at(self, t: float) -> np.ndarray:
        self._cap.set(cv2.CAP_PROP_POS_FRAMES, int(round(t * self.fps)))
        ok, bgr = self._cap.read()
        if not ok:
            raise IngestionError(self.name, f"decode failed at t={t:.3f}s")
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)

    def close(self):
        self._cap.release()


class ImageFolderSource:
    """Folder of pre-extracted frames; file k (sorted) is taken as time k*P."""

    def __init__(self, path: str | os.PathLike, frame_period_s: float):
        self.name = str(path)
        self.files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        self.period = float(frame_period_s)

    @property
    def duration_s(self) -> float:
        return len(self.files) * self.period

    def frame_at(self, t: float) -> np.ndarray:
        path = self.files[int(round(t / self.period))]
        return read_rgb(path)


def open_source(path: str | os.PathLike, config: IngestConfig):
    p = Path(path)
    if p.is_dir():
        return ImageFolderSource(p, config.frame_period_s)
    if not p.exists():
        raise IngestionError(str(p), "no such file")
    if p.suffix.lower() not in VIDEO_EXTENSIONS:
        raise IngestionError(str(p), f"unsupported media type {p.suffix!r}")
    return VideoSource(p)


def extract_frames(video_source, config: IngestConfig) -> Iterator[Frame]:
    """Yield one frame every ``config.frame_period_s`` seconds, capped per video."""
    src = open_source(video_source, config) if isinstance(video_source, (str, os.PathLike)) else video_source
    for t in frame_timestamps(src.duration_s, config):
        yield Frame(np.ascontiguousarray(src.frame_at(t)), t)


# -- detection and alignment -----------------------------------------------


def canonical_template(size: int) -> np.ndarray:
    return CANONICAL_TEMPLATE_112 * (size / 112.0)


def alignment_matrix(landmarks: np.ndarray, size: int) -> np.ndarray:
    """2x3 similarity transform taking the 5 landmarks onto the canonical template."""
    tform = SimilarityTransform()
    if not tform.estimate(np.asarray(landmarks, np.float64), canonical_template(size)):
        raise ValueError("degenerate landmark configuration")
    return tform.params[:2].copy()


def align_face(frame: np.ndarray, landmarks: np.ndarray, size: int) -> np.ndarray:
    m = alignment_matrix(landmarks, size)
    return cv2.warpAffine(frame, m, (size, size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def accept_detection(det: FaceDetection, config: IngestConfig) -> bool:
    _, _, w, h = det.box
    return det.confidence >= config.detector_confidence and min(w, h) >= config.min_face_px


def detect_and_align(frame: np.ndarray, detector: Detector, config: IngestConfig) -> list[AlignedFace]:
    h, w = frame.shape[:2]
    out = []
    for det in detector(frame):
        if not accept_detection(det, config) or not det.inside(h, w):
            continue
        out.append(AlignedFace(align_face(frame, det.landmarks, config.target_size), det))
    return out


class StubDetector:
    """Deterministic detector for pipelines without a face model.

    ``fn`` maps a frame to a list of detections. With no ``fn``, every frame
    yields a single full-frame face whose landmarks are the canonical template
    scaled to the frame.
    """

    def __init__(self, fn: Callable[[np.ndarray], list[FaceDetection]] | None = None, confidence: float = 0.99):
        self.fn = fn
        self.confidence = confidence

    def __call__(self, frame: np.ndarray) -> list[FaceDetection]:
        if self.fn is not None:
            return list(self.fn(frame))
        h, w = frame.shape[:2]
        lm = CANONICAL_TEMPLATE_112 * np.array([w / 112.0, h / 112.0])
        return [FaceDetection((0.0, 0.0, float(w), float(h)), lm, self.confidence)]


# -- dataset ---------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ManifestRow:
    image_id: int
    source: str
    timestamp_s: float
    box_x: float
    box_y: float
    box_w: float
    box_h: float
    confidence: float

    def as_csv(self) -> list[str]:
        return [
            str(self.image_id),
            self.source,
            f"{self.timestamp_s:.3f}",
            f"{self.box_x:.2f}",
            f"{self.box_y:.2f}",
            f"{self.box_w:.2f}",
            f"{self.box_h:.2f}",
            f"{self.confidence:.4f}",
        ]


def shard_path(root: Path, image_id: int) -> Path:
    return root / "shards" / f"{image_id // SHARD_SIZE:05d}" / f"{image_id:09d}.png"


def read_rgb(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IngestionError(str(path), "image could not be decoded")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_rgb(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


class PriorDataset:
    """Sharded aligned crops plus a provenance manifest.

    Subsets returned by :func:`subsample` and :func:`filter_by_group` are
    views over the same shard directory with a reduced manifest.
    """

    def __init__(self, root: str | os.PathLike, rows: Sequence[ManifestRow], target_size: int):
        self.root = Path(root)
        self.rows = list(rows)
        self.target_size = int(target_size)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def size(self) -> int:
        return len(self.rows)

    def image_path(self, i: int) -> Path:
        return shard_path(self.root, self.rows[i].image_id)

    def load_image(self, i: int) -> np.ndarray:
        return read_rgb(self.image_path(i))

    def load_images(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.target_size, self.target_size, 3), np.uint8)
        return np.stack([self.load_image(i) for i in range(len(self))])

    def with_rows(self, rows: Sequence[ManifestRow]) -> "PriorDataset":
        return PriorDataset(self.root, rows, self.target_size)

    def manifest_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow(r.as_csv())
        return buf.getvalue()

    def write_manifest(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.manifest_text(), encoding="utf-8")
        meta = {"target_size": self.target_size, "size": len(self)}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))
        return path

    @classmethod
    def open(cls, root: str | os.PathLike, manifest: str | os.PathLike | None = None) -> "PriorDataset":
        root = Path(root)
        manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
        meta = json.loads(manifest.with_suffix(".json").read_text())
        with open(manifest, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ValueError(f"bad manifest header {reader.fieldnames}")
            rows = [
                ManifestRow(
                    int(r["image_id"]), r["source"], float(r["timestamp_s"]),
                    float(r["box_x"]), float(r["box_y"]), float(r["box_w"]), float(r["box_h"]),
                    float(r["confidence"]),
                )
                for r in reader
            ]
        return cls(root, rows, meta["target_size"])

    @classmethod
    def from_arrays(cls, images: np.ndarray, root: str | os.PathLike, source: str = "synthetic") -> "PriorDataset":
        """Write an in-memory image stack as a dataset (one manifest row per image)."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1] != images.shape[2] or images.shape[3] != 3 or images.dtype != np.uint8:
            raise ValueError("images must be an N x S x S x 3 uint8 array")
        root = Path(root)
        s = images.shape[1]
        rows = []
        for i, img in enumerate(images):
            write_rgb(shard_path(root, i), img)
            rows.append(ManifestRow(i, source, 0.0, 0.0, 0.0, float(s), float(s), 1.0))
        ds = cls(root, rows, s)
        ds.write_manifest()
        return ds


def read_media_manifest(path: str | os.PathLike) -> list[str]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def _ingest_source(source: str, detector: Detector, config: IngestConfig) -> list[tuple[float, AlignedFace]]:
    faces = []
    src = open_source(source, config)
    try:
        for frame in extract_frames(src, config):
            for face in detect_and_align(frame.image, detector, config):
                faces.append((frame.timestamp_s, face))
    finally:
        if hasattr(src, "close"):
            src.close()
    return faces


def build_prior_dataset(
    media_manifest: str | os.PathLike | Iterable[str],
    detector: Detector,
    config: IngestConfig,
    out_dir: str | os.PathLike,
    workers: int = 1,
) -> PriorDataset:
    """Ingest every listed source into a sharded dataset under ``out_dir``.

    Sources are processed independently (optionally in a thread pool); images
    are numbered in manifest order so the result does not depend on ``workers``.
    On failures the successful part is flushed, ``failures.json`` is written,
    and :class:`BuildError` is raised.
    """
    if isinstance(media_manifest, (str, os.PathLike)):
        sources = read_media_manifest(media_manifest)
    else:
        sources = list(media_manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def task(source):
        try:
            return source, _ingest_source(source, detector, config), None
        except IngestionError as exc:
            return source, [], exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, sources))
    else:
        results = [task(s) for s in sources]

    rows, failures = [], []
    next_id = 0
    for source, faces, err in results:  # single serialized sink
        if err is not None:
            log.error("ingestion failed for %s: %s", source, err.reason)
            failures.append({"source": source, "reason": err.reason})
            continue
        for t, face in faces:
            write_rgb(shard_path(out_dir, next_id), face.image)
            x, y, w, h = face.detection.box
            rows.append(ManifestRow(next_id, source, t, x, y, w, h, face.detection.confidence))
            next_id += 1
    ds = PriorDataset(out_dir, rows, config.target_size)
    ds.write_manifest()
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2))
        raise BuildError(ds, failures)
    return ds


def subsample(dataset: PriorDataset, fraction: float, seed: int) -> PriorDataset:
    """Seeded permutation prefix of length round(fraction * size).

    Using a prefix makes samples nested: a smaller fraction with the same seed
    selects a subset of a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset.with_rows(dataset.rows)
    n = int(round(fraction * len(dataset)))
    perm = np.random.default_rng(seed).permutation(len(dataset))
    keep = np.sort(perm[:n])
    return dataset.with_rows([dataset.rows[i] for i in keep])


def filter_by_group(dataset: PriorDataset, group_classifier: Callable[[np.ndarray], int], group_id: int, n_groups: int = 4) -> PriorDataset:
    """Keep the images the classifier assigns to ``group_id`` (groups are 1..n_groups)."""
    if group_id not in range(1, n_groups + 1):
        raise ValueError(f"unknown group_id {group_id}; expected 1..{n_groups}")
    keep = [row for i, row in enumerate(dataset.rows) if int(group_classifier(dataset.load_image(i))) == group_id]
    return dataset.with_rows(keep)
