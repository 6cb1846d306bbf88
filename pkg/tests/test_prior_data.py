import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frboost.prior_data import (
    CANONICAL_TEMPLATE_112,
    MANIFEST_HEADER,
    ArraySource,
    BuildError,
    FaceDetection,
    IngestConfig,
    IngestionError,
    PriorDataset,
    StubDetector,
    alignment_matrix,
    build_prior_dataset,
    detect_and_align,
    extract_frames,
    filter_by_group,
    frame_timestamps,
    read_rgb,
    subsample,
    write_rgb,
)


def _frame_folder(path, n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    path.mkdir(parents=True)
    for k in range(n):
        write_rgb(path / f"{k:04d}.png", rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
    return path


def _face_at(x, y, side, conf):
    lm = CANONICAL_TEMPLATE_112 * (side / 112.0) + np.array([x, y])
    return FaceDetection((x, y, side, side), lm, conf)


class TestIngestConfig:
    def test_defaults(self):
        c = IngestConfig()
        assert (c.frame_period_s, c.max_minutes_per_video, c.min_face_px, c.detector_confidence, c.target_size) == (5.0, 20.0, 100, 0.9, 112)

    @pytest.mark.parametrize("kw", [
        {"frame_period_s": 0}, {"max_minutes_per_video": -1}, {"min_face_px": 0},
        {"detector_confidence": 1.5}, {"target_size": 4},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            IngestConfig(**kw)


class TestFrameSampling:
    def test_one_minute_video(self):
        frames = list(extract_frames(ArraySource(np.zeros((60, 4, 4, 3), np.uint8), fps=1.0), IngestConfig()))
        assert [f.timestamp_s for f in frames] == [5.0 * k for k in range(12)]

    def test_short_video_single_frame(self):
        frames = list(extract_frames(ArraySource(np.zeros((3, 4, 4, 3), np.uint8), fps=1.0), IngestConfig()))
        assert [f.timestamp_s for f in frames] == [0.0]

    def test_cap_at_twenty_minutes(self):
        ts = frame_timestamps(25 * 60, IngestConfig())
        # enumeration oracle: every multiple of 5 strictly below 1200
        oracle = [t for t in range(0, 25 * 60, 5) if t < 20 * 60]
        assert len(ts) == len(oracle) == 240
        assert ts[-1] == 1195.0

    def test_zero_length(self):
        assert list(extract_frames(ArraySource(np.zeros((0, 4, 4, 3), np.uint8), fps=25.0), IngestConfig())) == []

    def test_frames_carry_content_at_timestamp(self):
        frames = np.arange(30, dtype=np.uint8)[:, None, None, None] * np.ones((1, 2, 2, 3), np.uint8)
        out = list(extract_frames(ArraySource(frames, fps=2.0), IngestConfig()))
        assert [int(f.image[0, 0, 0]) for f in out] == [0, 10, 20]

    @settings(max_examples=200, deadline=None)
    @given(
        duration=st.floats(0.0, 3000.0, allow_nan=False),
        period=st.floats(0.1, 60.0, allow_nan=False),
        cap=st.floats(0.05, 30.0, allow_nan=False),
    )
    def test_multiples_below_cap(self, duration, period, cap):
        cfg = IngestConfig(frame_period_s=period, max_minutes_per_video=cap)
        ts = frame_timestamps(duration, cfg)
        limit = min(duration, cap * 60)
        assert all(t < limit for t in ts)
        assert ts == [k * period for k in range(len(ts))]
        # nothing further fits
        assert len(ts) * period >= limit or np.isclose(len(ts) * period, limit)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError) as err:
            list(extract_frames(tmp_path / "nope.mp4", IngestConfig()))
        assert "nope.mp4" in str(err.value)

    def test_corrupt_video(self, tmp_path):
        bad = tmp_path / "broken.avi"
        bad.write_bytes(b"not a video at all")
        with pytest.raises(IngestionError) as err:
            list(extract_frames(bad, IngestConfig()))
        assert "broken.avi" in str(err.value)

    def test_video_file(self, tmp_path):
        path = tmp_path / "clip.avi"
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 2.0, (32, 32))
        if not writer.isOpened():
            pytest.skip("no MJPG writer available")
        for k in range(120):
            writer.write(np.full((32, 32, 3), k * 2, np.uint8))
        writer.release()
        frames = list(extract_frames(path, IngestConfig()))
        assert len(frames) == 12
        assert frames[0].image.shape == (32, 32, 3)


class TestDetectAndAlign:
    def test_accepts_large_confident_face(self):
        frame = np.random.default_rng(0).integers(0, 256, (300, 300, 3), dtype=np.uint8)
        faces = detect_and_align(frame, StubDetector(lambda f: [_face_at(60, 70, 150, 0.95)]), IngestConfig())
        assert len(faces) == 1
        assert faces[0].image.shape == (112, 112, 3)
        assert faces[0].image.dtype == np.uint8

    def test_rejects_small_face(self):
        frame = np.zeros((300, 300, 3), np.uint8)
        assert detect_and_align(frame, StubDetector(lambda f: [_face_at(10, 10, 50, 0.99)]), IngestConfig()) == []

    def test_rejects_low_confidence(self):
        frame = np.zeros((300, 300, 3), np.uint8)
        assert detect_and_align(frame, StubDetector(lambda f: [_face_at(10, 10, 150, 0.5)]), IngestConfig()) == []

    def test_no_faces(self):
        assert detect_and_align(np.zeros((50, 50, 3), np.uint8), StubDetector(lambda f: []), IngestConfig()) == []

    def test_template_is_fixed_point(self):
        m = alignment_matrix(CANONICAL_TEMPLATE_112, 112)
        np.testing.assert_allclose(m, [[1, 0, 0], [0, 1, 0]], atol=1e-9)
        frame = np.random.default_rng(1).integers(0, 256, (112, 112, 3), dtype=np.uint8)
        faces = detect_and_align(frame, StubDetector(), IngestConfig())
        np.testing.assert_array_equal(faces[0].image, frame)

    def test_fixed_point_up_to_resize(self):
        frame = np.random.default_rng(2).integers(0, 256, (224, 224, 3), dtype=np.uint8)
        faces = detect_and_align(frame, StubDetector(), IngestConfig(min_face_px=100))
        # pure 0.5 scaling: output pixel x samples input pixel 2x
        np.testing.assert_array_equal(faces[0].image, frame[::2, ::2])
        np.testing.assert_allclose(alignment_matrix(CANONICAL_TEMPLATE_112 * 2, 112), [[0.5, 0, 0], [0, 0.5, 0]], atol=1e-9)

    def test_detection_invariants(self):
        with pytest.raises(ValueError):
            FaceDetection((0, 0, 0, 10), np.zeros((5, 2)), 0.9)
        with pytest.raises(ValueError):
            FaceDetection((0, 0, 10, 10), np.zeros((4, 2)), 0.9)
        det = _face_at(0, 0, 200, 0.99)
        assert not det.inside(100, 100)

    def test_landmarks_outside_frame_skipped(self):
        frame = np.zeros((120, 120, 3), np.uint8)
        assert detect_and_align(frame, StubDetector(lambda f: [_face_at(0, 0, 200, 0.99)]), IngestConfig()) == []


class TestBuild:
    def _manifest(self, tmp_path, n_videos=2, frames=12):
        lines = ["# two toy clips"]
        for v in range(n_videos):
            lines.append(str(_frame_folder(tmp_path / f"video{v}", frames, size=40, seed=v)))
        path = tmp_path / "media.txt"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_counts(self, tmp_path):
        ds = build_prior_dataset(self._manifest(tmp_path), StubDetector(), IngestConfig(min_face_px=8, target_size=16), tmp_path / "out")
        assert len(ds) == 24
        imgs = ds.load_images()
        assert imgs.shape == (24, 16, 16, 3) and imgs.dtype == np.uint8
        assert [r.timestamp_s for r in ds.rows[:12]] == [5.0 * k for k in range(12)]
        assert len({r.image_id for r in ds.rows}) == 24

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("# nothing\n")
        ds = build_prior_dataset(tmp_path / "m.txt", StubDetector(), IngestConfig(), tmp_path / "out")
        assert len(ds) == 0
        assert (tmp_path / "out" / "manifest.csv").read_text().strip() == ",".join(MANIFEST_HEADER)
        assert len(PriorDataset.open(tmp_path / "out")) == 0

    def test_deterministic_manifest(self, tmp_path):
        m = self._manifest(tmp_path)
        cfg = IngestConfig(min_face_px=8, target_size=16)
        a = build_prior_dataset(m, StubDetector(), cfg, tmp_path / "a")
        b = build_prior_dataset(m, StubDetector(), cfg, tmp_path / "b", workers=2)
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
        np.testing.assert_array_equal(a.load_images(), b.load_images())

    def test_reopen(self, tmp_path):
        ds = build_prior_dataset(self._manifest(tmp_path), StubDetector(), IngestConfig(min_face_px=8, target_size=16), tmp_path / "out")
        again = PriorDataset.open(tmp_path / "out")
        assert again.rows == ds.rows
        np.testing.assert_array_equal(again.load_images(), ds.load_images())

    def test_partial_failure(self, tmp_path):
        m = self._manifest(tmp_path, n_videos=1, frames=3)
        m.write_text(m.read_text() + str(tmp_path / "missing.mp4") + "\n")
        with pytest.raises(BuildError) as err:
            build_prior_dataset(m, StubDetector(), IngestConfig(min_face_px=8, target_size=16), tmp_path / "out")
        assert len(err.value.dataset) == 3
        failures = json.loads((tmp_path / "out" / "failures.json").read_text())
        assert failures[0]["source"].endswith("missing.mp4")
        assert len(PriorDataset.open(tmp_path / "out")) == 3


@pytest.fixture
def thousand(tmp_path):
    imgs = np.zeros((1000, 8, 8, 3), np.uint8)
    imgs[:, 0, 0, 0] = np.arange(1000) % 256
    return PriorDataset.from_arrays(imgs, tmp_path / "ds")


class TestSubsample:
    def test_one_percent(self, thousand):
        assert len(subsample(thousand, 0.01, seed=0)) == 10

    def test_full_is_identity(self, thousand):
        assert subsample(thousand, 1.0, seed=3).rows == thousand.rows

    def test_deterministic(self, thousand):
        assert subsample(thousand, 0.1, seed=5).rows == subsample(thousand, 0.1, seed=5).rows
        assert subsample(thousand, 0.1, seed=5).rows != subsample(thousand, 0.1, seed=6).rows

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
    def test_bad_fraction(self, thousand, f):
        with pytest.raises(ValueError):
            subsample(thousand, f, seed=0)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.001, 1.0), b=st.floats(0.001, 1.0), seed=st.integers(0, 1000))
    def test_nested(self, tmp_path_factory, a, b, seed):
        rows = [object() for _ in range(500)]
        ds = PriorDataset(tmp_path_factory.getbasetemp(), rows, 8)
        lo, hi = sorted((a, b))
        small, big = subsample(ds, lo, seed), subsample(ds, hi, seed)
        assert len(small) == round(lo * 500)
        assert {id(r) for r in small.rows} <= {id(r) for r in big.rows}


class TestFilter:
    def test_single_group(self, thousand):
        assert len(filter_by_group(thousand, lambda img: 1, 1)) == 1000
        assert len(filter_by_group(thousand, lambda img: 1, 2)) == 0

    def test_split(self, tmp_path):
        imgs = np.zeros((100, 8, 8, 3), np.uint8)
        imgs[:70, :, :, 2] = 200  # tagged as group 1
        ds = PriorDataset.from_arrays(imgs, tmp_path / "ds")
        tag = lambda img: 1 if img[0, 0, 2] > 100 else 3
        kept = filter_by_group(ds, tag, 1)
        assert len(kept) == 70
        assert all(read_rgb(kept.image_path(i))[0, 0, 2] > 100 for i in range(len(kept)))
        assert kept.rows == ds.rows[:70]

    def test_unknown_group(self, thousand):
        with pytest.raises(ValueError):
            filter_by_group(thousand, lambda img: 1, 7)
