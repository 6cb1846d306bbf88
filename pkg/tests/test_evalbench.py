import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frboost.encoder.trunk import TrunkConfig
from frboost.evalbench.consensus import UNDECIDED, assign_groups, consensus_group, sample_photos
from frboost.evalbench.groups import load_group_classifier, train_group_classifier
from frboost.evalbench.metrics import exact_roc, lfw_accuracy, roc_sweep, tpr_at_fpr
from frboost.evalbench.protocols import (
    ImplicitNegatives,
    PairProtocol,
    ProtocolError,
    build_rbweb_protocol,
    build_rfw_style_protocol,
    n_implicit_pairs,
    random_similarity,
)
from frboost.evalbench.report import evaluate, mean_and_std, report
from frboost.evalbench.scoring import (
    EmbeddingTable,
    ScoringError,
    embed_images,
    read_embedding_cache,
    score_pairs,
    write_embedding_cache,
)
from frboost.facerec.backbone import Backbone
from frboost.facerec.data import IdentityDataset
from frboost import toydata

MICRO = TrunkConfig("micro", (16, 16, 16, 16), True, 16)


def grouped(n_groups, n_people, per_person):
    """group -> {person: [image ids]} with ids like g1/p3/i2."""
    return {
        g: {f"g{g}/p{p}": [f"g{g}/p{p}/i{i}" for i in range(per_person)] for p in range(n_people)}
        for g in range(1, n_groups + 1)
    }


def person_of(image_id):
    return image_id.rsplit("/", 1)[0]


# ---------------------------------------------------------------- consensus


class TestConsensus:
    def test_thirteen_photos_undecided(self):
        assert consensus_group([f"img{i}" for i in range(13)], lambda _: 1) is UNDECIDED

    def test_fourteen_unanimous_photos_decided(self):
        assert consensus_group([f"img{i}" for i in range(14)], lambda _: 3) == 3

    def test_sixteen_of_twenty_is_enough(self):
        photos = list(range(20))
        assert consensus_group(photos, lambda i: 2 if i < 16 else 1) == 2

    def test_fifteen_of_twenty_is_not(self):
        photos = list(range(20))
        assert consensus_group(photos, lambda i: 2 if i < 15 else 1) is UNDECIDED

    def test_even_split_undecided(self):
        # 30 photos: the sampled 20 vote 10/10 whatever the sample
        photos = [f"x{i}" for i in range(30)]
        chosen = set(sample_photos(photos, 20, 0))
        order = sorted(chosen)
        votes = {photos[i]: (1 if k < 10 else 2) for k, i in enumerate(order)}
        assert consensus_group(photos, lambda p: votes.get(p, 1), rng=0) is UNDECIDED

    def test_at_most_twenty_photos_classified(self):
        calls = []
        consensus_group(list(range(50)), lambda p: calls.append(p) or 1)
        assert len(calls) == 20 and len(set(calls)) == 20

    def test_deterministic_under_seed(self):
        photos = [f"p{i}" for i in range(40)]
        clf = lambda p: int(p[1:]) % 3  # noqa: E731
        assert consensus_group(photos, clf, 7) == consensus_group(photos, clf, 7)
        assert sample_photos(photos, 20, 7) == sample_photos(photos, 20, 7)
        assert sample_photos(photos, 20, 7) != sample_photos(photos, 20, 8)

    def test_generator_rng_accepted(self):
        photos = [f"p{i}" for i in range(20)]
        assert consensus_group(photos, lambda _: 4, np.random.default_rng(0)) == 4

    def test_numpy_images_hashable(self):
        imgs = [np.full((4, 4, 3), i, np.uint8) for i in range(16)]
        assert consensus_group(imgs, lambda im: 1 if im[0, 0, 0] < 14 else 2) == 1

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(14, 40),
        st.integers(0, 100),
        st.integers(1, 30),
        st.integers(0, 2**31),
    )
    def test_majority_votes_never_flip_decision(self, n, minority_pct, extra, seed):
        # photos 0..n-1; a fixed fraction vote group 9, the rest group 1
        rng = np.random.default_rng(seed)
        minority = set(rng.choice(n, n * minority_pct // 400, replace=False).tolist())
        clf = lambda p: 9 if p in minority else 1  # noqa: E731
        before = consensus_group(list(range(n)), clf, seed)
        after = consensus_group(list(range(n + extra)), clf, seed)  # added photos vote 1
        if before == 1:
            assert after == 1

    def test_assign_groups_drops_undecided(self):
        people = {"a": list(range(20)), "b": list(range(5)), "c": [f"c{i}" for i in range(20)]}
        clf = lambda p: 2 if isinstance(p, int) else 3  # noqa: E731
        assert assign_groups(people, clf) == {"a": 2, "c": 3}


class TestGroupClassifier:
    def test_learns_skin_groups_and_roundtrips(self, tmp_path):
        toy = toydata.make_identity_images(40, 4, 16, seed=0, groups=(1, 3))
        ds = IdentityDataset.from_arrays(toy.images, toy.labels, toy.groups)
        clf = train_group_classifier(Backbone.scratch(MICRO, emb_dim=16, seed=0), ds, seed=0)
        pred = clf.predict(ds.images)
        truth = ds.groups[ds.labels]
        assert set(np.unique(pred)) <= {1, 3}
        assert (pred == truth).mean() > 0.8
        assert clf(ds.images[0]) == pred[0]
        path = tmp_path / "groups.pt"
        clf.checkpoint().save(path)
        again = load_group_classifier(clf.backbone, str(path))
        assert np.array_equal(again.predict(ds.images), pred)

    def test_single_group_rejected(self):
        toy = toydata.make_identity_images(4, 2, 16, seed=0, groups=(2,))
        ds = IdentityDataset.from_arrays(toy.images, toy.labels, toy.groups)
        with pytest.raises(ValueError):
            train_group_classifier(Backbone.scratch(MICRO, emb_dim=8), ds, epochs=1)


# ---------------------------------------------------------------- protocols


class TestRbweb:
    def test_full_scale_counts(self):
        # the implicit descriptor is what keeps this cheap
        n = 18_000
        assert n * 5 == 90_000
        assert n_implicit_pairs(n) == 161_991_000

    def test_full_scale_protocol(self):
        people = {1: {f"p{i}": [f"p{i}/a", f"p{i}/b", f"p{i}/c", f"p{i}/d"] for i in range(18_000)}}
        proto = build_rbweb_protocol(people, 18_000, 5, rng=0)
        assert proto.n_positives(1) == 90_000
        assert proto.n_negatives(1) == 161_991_000

    def test_hundred_people(self):
        proto = build_rbweb_protocol(grouped(2, 120, 4), 100, 5, rng=3)
        for g in (1, 2):
            assert proto.n_positives(g) == 500
            assert proto.n_negatives(g) == 4950

    @pytest.mark.parametrize("n", [1, 2, 7, 100, 1000])
    def test_descriptor_expansion(self, n):
        proto = build_rbweb_protocol(grouped(1, n, 3), n, 1, rng=0)
        neg = proto.negatives_of(1)
        pairs = list(neg.pairs())
        assert len(pairs) == len(neg) == n * (n - 1) // 2
        keys = {frozenset((a, b)) for a, b, _ in pairs}
        assert len(keys) == len(pairs)
        assert all(person_of(a) != person_of(b) for a, b, _ in pairs)

    def test_single_person_zero_negatives(self):
        proto = build_rbweb_protocol(grouped(1, 1, 3), 1, 2)
        assert proto.n_negatives(1) == 0

    def test_positive_invariants(self):
        proto = build_rbweb_protocol(grouped(1, 30, 4), 30, 5, rng=1)
        pos = proto.positives_of(1)
        assert all(person_of(a) == person_of(b) and a != b for a, b, _ in pos)
        keys = [frozenset((a, b)) for a, b, _ in pos]
        assert len(set(keys)) == len(keys)
        # with 4 images and 5 pairs, the first 4 pairs use distinct first images
        by_person = {}
        for a, _, _ in pos:
            by_person.setdefault(person_of(a), []).append(a)
        assert all(len(set(firsts[:4])) == 4 for firsts in by_person.values())

    def test_deterministic(self):
        a = build_rbweb_protocol(grouped(2, 40, 5), 30, 5, rng=11)
        b = build_rbweb_protocol(grouped(2, 40, 5), 30, 5, rng=11)
        assert a.positives == b.positives
        assert a.negatives == b.negatives

    def test_too_few_people_names_group(self):
        with pytest.raises(ProtocolError) as err:
            build_rbweb_protocol(grouped(2, 10, 3), 20, 1)
        assert err.value.group == 1 and "group 1" in str(err.value)

    def test_too_few_images_for_pairs(self):
        with pytest.raises(ProtocolError):
            build_rbweb_protocol(grouped(1, 5, 3), 5, 4)  # 3 images give only 3 distinct pairs

    def test_write_read_roundtrip(self, tmp_path):
        proto = build_rbweb_protocol(grouped(2, 12, 3), 10, 2, rng=0)
        proto.write(tmp_path)
        assert (tmp_path / "implicit_1.json").exists()
        desc = json.loads((tmp_path / "implicit_2.json").read_text())
        assert set(desc) == {"group_id", "representative_images", "seed"}
        back = PairProtocol.read(tmp_path)
        assert back.positives == proto.positives
        assert back.negatives == proto.negatives


class TestRfw:
    def test_four_groups_sum_to_24k(self):
        proto = build_rfw_style_protocol(grouped(4, 300, 10), 3000, rng=0)
        total = sum(proto.n_positives(g) + proto.n_negatives(g) for g in proto.groups)
        assert total == 24_000
        for g in proto.groups:
            assert proto.n_positives(g) == proto.n_negatives(g) == 3000

    def test_pair_invariants_and_no_duplicates(self):
        proto = build_rfw_style_protocol(grouped(2, 8, 3), 20, rng=5)
        for g in proto.groups:
            pos, neg = proto.positives_of(g), proto.negatives_of(g)
            assert all(person_of(a) == person_of(b) and a != b for a, b, _ in pos)
            assert all(person_of(a) != person_of(b) for a, b, _ in neg)
            for pairs in (pos, neg):
                keys = [frozenset((a, b)) for a, b, _ in pairs]
                assert len(set(keys)) == len(keys)

    def test_exhaustive_small_instance(self):
        # 3 people x 2 images: 3 positives and 12 negatives exist; ask for all 3 positives
        proto = build_rfw_style_protocol(grouped(1, 3, 2), 3, rng=0)
        assert {frozenset((a, b)) for a, b, _ in proto.positives} == {
            frozenset((f"g1/p{p}/i0", f"g1/p{p}/i1")) for p in range(3)
        }

    def test_negatives_are_most_similar_candidates(self):
        # similarity = shared image index; mined negatives must all share it
        def sim(a, b):
            return np.array([1.0 if x[-1] == y[-1] else 0.0 for x, y in zip(a, b)])

        proto = build_rfw_style_protocol(grouped(1, 40, 5), 30, similarity_fn=sim, rng=2)
        assert all(a[-1] == b[-1] for a, b, _ in proto.negatives_of(1))

    def test_random_stub_is_uniform(self):
        # with the stub every person is about equally likely in the negatives
        proto = build_rfw_style_protocol(grouped(1, 10, 30), 2000, similarity_fn=random_similarity(0), rng=0)
        counts = np.zeros(10)
        for a, b, _ in proto.negatives_of(1):
            counts[int(person_of(a).split("p")[-1])] += 1
            counts[int(person_of(b).split("p")[-1])] += 1
        expected = 4000 / 10
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 27.9  # 99.9% quantile, 9 dof

    def test_insufficient_positives(self):
        with pytest.raises(ProtocolError) as err:
            build_rfw_style_protocol(grouped(1, 3, 2), 4)
        assert err.value.group == 1

    def test_single_person_has_no_negatives(self):
        with pytest.raises(ProtocolError):
            build_rfw_style_protocol({1: {"p": ["a", "b", "c"]}}, 1)

    def test_protocol_file_format(self, tmp_path):
        proto = build_rfw_style_protocol(grouped(2, 5, 3), 4, rng=0)
        path = proto.write(tmp_path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 16
        for line in lines:
            a, b, label, g = line.split("\t")
            assert label in ("0", "1") and g in ("1", "2")
        back = PairProtocol.read(tmp_path)
        assert back.positives == proto.positives and back.negatives == proto.negatives

    def test_malformed_file(self, tmp_path):
        (tmp_path / "pairs.tsv").write_text("a\tb\t2\t1\n")
        with pytest.raises(ValueError, match="line 1"):
            PairProtocol.read(tmp_path)


# ---------------------------------------------------------------- scoring


def vector_world(n_people=10, per_person=3, dim=6, seed=0):
    """Image ids mapped to random vectors; the 'embedder' just stacks them."""
    rng = np.random.default_rng(seed)
    people = grouped(2, n_people // 2, per_person)
    vecs = {img: rng.normal(size=dim) for g in people.values() for imgs in g.values() for img in imgs}
    return people, vecs


def stack(batch):
    return np.stack(batch)


class TestScoring:
    def test_identical_images_score_one(self):
        vecs = {"a": np.array([3.0, -1.0, 2.0]), "b": np.array([3.0, -1.0, 2.0])}
        proto = PairProtocol([("a", "b", 1), ("a", "a", 1)], {1: [("a", "b", 1)]})
        pos, _ = score_pairs(stack, proto, loader=vecs)[1]
        assert np.allclose(pos, 1.0, atol=1e-6)

    def test_scores_bounded(self):
        people, vecs = vector_world(20, 4)
        proto = build_rbweb_protocol(people, 10, 3, rng=0)
        for pos, neg in score_pairs(stack, proto, loader=vecs).values():
            both = np.concatenate([pos, neg])
            assert np.all(both >= -1.0) and np.all(both <= 1.0)

    @pytest.mark.parametrize("chunk", [1, 3, 7, 64])
    def test_chunked_equals_monolithic(self, chunk):
        people, vecs = vector_world(20, 3)  # 10 people per group
        proto = build_rbweb_protocol(people, 10, 3, rng=0)
        mono = score_pairs(stack, proto, chunk_size=1 << 20, loader=vecs)
        chunked = score_pairs(stack, proto, chunk_size=chunk, loader=vecs)
        for g in proto.groups:
            assert np.array_equal(mono[g][0], chunked[g][0])
            assert np.array_equal(mono[g][1], chunked[g][1])

    def test_streamed_negatives_match(self):
        people, vecs = vector_world(20, 3)
        proto = build_rbweb_protocol(people, 10, 2, rng=0)
        full = score_pairs(stack, proto, chunk_size=4, loader=vecs)
        lazy = score_pairs(stack, proto, chunk_size=4, loader=vecs, materialize_implicit=False)
        for g in proto.groups:
            assert callable(lazy[g][1])
            assert np.array_equal(np.concatenate(list(lazy[g][1]())), full[g][1])

    def test_each_image_embedded_once(self):
        people, vecs = vector_world(20, 3)
        proto = build_rfw_style_protocol(people, 8, rng=0)
        seen = []

        def embedder(batch):
            seen.extend(map(tuple, batch))
            return np.stack(batch)

        score_pairs(embedder, proto, loader=vecs)
        assert len(seen) == len(set(seen)) == len(proto.image_ids())

    def test_matches_explicit_cosine(self):
        people, vecs = vector_world(10, 3)
        proto = build_rfw_style_protocol(people, 5, rng=0)
        out = score_pairs(stack, proto, loader=vecs)
        for g in proto.groups:
            for (a, b, _), s in zip(proto.positives_of(g), out[g][0]):
                va, vb = vecs[a], vecs[b]
                assert s == pytest.approx(va @ vb / np.linalg.norm(va) / np.linalg.norm(vb), abs=1e-6)  # cached as float32

    def test_missing_image_names_pair(self):
        proto = PairProtocol([("a", "ghost", 1)], {1: []})
        with pytest.raises(ScoringError, match="ghost"):
            score_pairs(stack, proto, loader={"a": np.ones(3)})

    def test_missing_file_on_disk(self, tmp_path):
        proto = PairProtocol([(str(tmp_path / "x.png"), str(tmp_path / "y.png"), 1)], {1: []})
        with pytest.raises(ScoringError, match="x.png"):
            score_pairs(stack, proto)

    def test_table_missing_id(self):
        table = EmbeddingTable(["a"], np.ones((1, 3)))
        proto = PairProtocol([("a", "b", 1)], {1: []})
        with pytest.raises(ScoringError, match="'b'"):
            score_pairs(None, proto, table=table)

    def test_bad_chunk_size(self):
        with pytest.raises(ValueError):
            score_pairs(stack, PairProtocol([], {}), chunk_size=0)

    def test_backbone_embedder(self):
        rng = np.random.default_rng(0)
        imgs = {f"i{k}": rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for k in range(4)}
        proto = PairProtocol([("i0", "i0", 1), ("i1", "i2", 1)], {1: [("i0", "i3", 1)]})
        pos, neg = score_pairs(Backbone.scratch(MICRO, emb_dim=8), proto, loader=imgs)[1]
        assert pos[0] == pytest.approx(1.0, abs=1e-6)
        assert -1 <= neg[0] <= 1


class TestEmbeddingCache:
    def test_roundtrip_and_layout(self, tmp_path):
        ids = ["a.png", "dir/b.png", "ü.png"]
        emb = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        path = tmp_path / "emb.bin"
        write_embedding_cache(path, ids, emb)
        raw = path.read_bytes()
        assert raw[:4] == b"EMB1"
        assert int.from_bytes(raw[4:8], "little") == 3
        assert int.from_bytes(raw[8:12], "little") == 4
        assert int.from_bytes(raw[12:16], "little") == 0
        assert np.array_equal(np.frombuffer(raw[16:64], "<f4").reshape(3, 4), emb)
        assert raw[64:].split(b"\0")[:3] == [i.encode() for i in ids]
        back_ids, back = read_embedding_cache(path)
        assert back_ids == ids and np.array_equal(back, emb)

    def test_table_roundtrip(self, tmp_path):
        table = embed_images(stack, ["x", "y"], {"x": np.ones(3), "y": np.arange(3.0)})
        table.save(tmp_path / "t.bin")
        again = EmbeddingTable.load(tmp_path / "t.bin")
        assert again.ids == table.ids and np.array_equal(again.unit, table.unit)

    def test_rejects_wrong_magic(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError):
            read_embedding_cache(tmp_path / "bad.bin")

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            write_embedding_cache(tmp_path / "e.bin", ["a"], np.zeros((2, 3)))


# ---------------------------------------------------------------- metrics


class TestLfwAccuracy:
    def test_separable(self):
        res = lfw_accuracy(np.full(300, 0.9), np.full(300, 0.1))
        assert res.accuracy == 100.0 and res.best_threshold_accuracy == 100.0

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        res = lfw_accuracy(rng.normal(size=3000), rng.normal(size=3000))
        assert abs(res.accuracy - 50.0) <= 3.0

    def test_swap_symmetry(self):
        rng = np.random.default_rng(1)
        pos, neg = rng.normal(0.5, 0.3, 500), rng.normal(0.2, 0.3, 500)
        a, b = lfw_accuracy(pos, neg, seed=4), lfw_accuracy(neg, pos, seed=4)
        assert a.best_threshold_accuracy == b.best_threshold_accuracy
        assert a.accuracy == b.accuracy
        assert a.accuracy > 70

    def test_swap_without_flip_collapses(self):
        rng = np.random.default_rng(1)
        pos, neg = rng.normal(0.8, 0.1, 500), rng.normal(0.1, 0.1, 500)
        assert lfw_accuracy(neg, pos, allow_flip=False).accuracy <= 55

    def test_ten_folds_of_held_out_pairs(self):
        rng = np.random.default_rng(2)
        res = lfw_accuracy(rng.random(100), rng.random(100))
        assert len(res.fold_accuracies) == 10
        assert res.accuracy == pytest.approx(np.mean(res.fold_accuracies))

    def test_errors(self):
        with pytest.raises(ValueError):
            lfw_accuracy([], [0.1])
        with pytest.raises(ValueError):
            lfw_accuracy([0.1], [])
        with pytest.raises(ValueError):
            lfw_accuracy([0.2, 0.3], [0.1], folds=1)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-1, 1), min_size=5, max_size=40),
        st.lists(st.floats(-1, 1), min_size=5, max_size=40),
    )
    def test_bounded_and_separability(self, pos, neg):
        res = lfw_accuracy(pos, neg, folds=2, allow_flip=False)
        assert 0.0 <= res.accuracy <= 100.0
        assert 0.0 <= res.best_threshold_accuracy <= 100.0
        assert (res.best_threshold_accuracy == 100.0) == (min(pos) > max(neg))


def brute_force_tpr(pos, neg, target):
    """Try every candidate threshold: each score, nudged up, plus -inf."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    best = None
    for t in np.concatenate([[-np.inf], np.nextafter(np.concatenate([pos, neg]), np.inf), pos, neg]):
        if (neg >= t).mean() <= target and (best is None or t < best):
            best = t
    return 100.0 * (pos >= best).mean()


class TestRoc:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        pos, neg = rng.uniform(0.2, 0.6, 50), rng.uniform(0.2, 0.6, 50)
        curve = roc_sweep(pos, neg)
        assert (curve.tpr[0], curve.fpr[0]) == (1.0, 1.0)
        assert (curve.tpr[-1], curve.fpr[-1]) == (0.0, 0.0)
        assert curve.thresholds[0] == 0.1 and curve.thresholds[-1] == 0.75

    def test_sweep_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        pos, neg = rng.uniform(0, 1, 1000), rng.uniform(0, 1, 10_000)
        curve = roc_sweep(pos, neg)
        exact = exact_roc(pos, neg)
        sp, sn = np.sort(pos), np.sort(neg)
        for t, tpr, fpr in zip(curve.thresholds, curve.tpr, curve.fpr):
            assert tpr == (len(sp) - np.searchsorted(sp, t, "left")) / 1000
            assert fpr == (len(sn) - np.searchsorted(sn, t, "left")) / 10_000
            # the same point appears on the exact curve at the next observed score
            k = np.searchsorted(exact.thresholds, t, "left")
            assert (exact.tpr[k], exact.fpr[k]) == (tpr, fpr)

    def test_monotone(self):
        rng = np.random.default_rng(2)
        curve = roc_sweep(rng.random(200), rng.random(300), 0.0, 1.0, 101)
        assert np.all(np.diff(curve.tpr) <= 0) and np.all(np.diff(curve.fpr) <= 0)
        exact = exact_roc(rng.random(200), rng.random(300))
        assert np.all(np.diff(exact.tpr) <= 0) and np.all(np.diff(exact.fpr) <= 0)

    def test_streaming_negatives(self):
        rng = np.random.default_rng(3)
        pos, neg = rng.random(100), rng.random(1000)
        whole = roc_sweep(pos, neg)
        chunks = roc_sweep(pos, lambda: iter(np.array_split(neg, 7)))
        assert np.array_equal(whole.fpr, chunks.fpr)

    def test_errors(self):
        with pytest.raises(ValueError):
            roc_sweep([0.5], [0.1], 0.7, 0.2)
        with pytest.raises(ValueError):
            roc_sweep([0.5], [0.1], steps=1)
        with pytest.raises(ValueError):
            roc_sweep([], [0.1])
        with pytest.raises(ValueError):
            roc_sweep([0.5], [])


class TestTprAtFpr:
    def test_perfect_separation(self):
        pos, neg = np.full(100, 0.9), np.linspace(0, 0.5, 10_000)
        for target in (1e-1, 1e-3, 1e-4):
            assert tpr_at_fpr(pos, neg, target).tpr == 100.0

    def test_step_case(self):
        # 1% of negatives (1 of 100) sit above every positive
        pos = np.linspace(0.3, 0.6, 50)
        neg = np.concatenate([np.linspace(0.0, 0.2, 99), [0.9]])
        assert tpr_at_fpr(pos, neg, 1e-2).tpr == 100.0
        r = tpr_at_fpr(pos, neg, 1e-3)
        assert r.tpr == 0.0 and r.fpr == 0.0
        assert r.below_resolution

    def test_resolution_flag(self):
        assert not tpr_at_fpr([0.5], np.zeros(1000), 1e-3).below_resolution
        assert tpr_at_fpr([0.5], np.zeros(999), 1e-3).below_resolution

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pos = np.round(rng.normal(0.5, 0.2, 60), 2)  # ties on purpose
        neg = np.round(rng.normal(0.2, 0.2, 400), 2)
        for target in (1e-1, 2e-2, 5e-3, 1e-3):
            assert tpr_at_fpr(pos, neg, target).tpr == pytest.approx(brute_force_tpr(pos, neg, target), rel=1e-12)

    def test_large_instance_sort_oracle(self):
        rng = np.random.default_rng(5)
        pos, neg = rng.normal(1, 1, 1000), rng.normal(0, 1, 100_000)
        sn = np.sort(neg)[::-1]
        for target in (1e-2, 1e-3, 1e-4):
            k = int(target * len(neg))
            expected = 100.0 * (pos > sn[k]).mean()
            assert tpr_at_fpr(pos, neg, target).tpr == expected

    def test_streaming_equals_array(self):
        rng = np.random.default_rng(6)
        pos, neg = rng.normal(1, 1, 100), rng.normal(0, 1, 5000)
        a = tpr_at_fpr(pos, neg, 1e-3)
        b = tpr_at_fpr(pos, lambda: iter(np.array_split(neg, 9)), 1e-3)
        assert (a.tpr, a.threshold) == (b.tpr, b.threshold)

    def test_sweep_mode_uses_swept_thresholds(self):
        rng = np.random.default_rng(7)
        pos, neg = rng.uniform(0, 1, 500), rng.uniform(0, 1, 5000)
        curve = roc_sweep(pos, neg)
        r = tpr_at_fpr(curve, fpr_target=0.3, mode="sweep")
        assert r.threshold in curve.thresholds and r.fpr <= 0.3 and r.mode == "sweep"
        k = list(curve.thresholds).index(r.threshold)
        assert curve.fpr[k - 1] > 0.3
        # nothing in the swept range gets down to 10%
        assert tpr_at_fpr(curve, fpr_target=0.1, mode="sweep").tpr == 0.0

    def test_bad_target(self):
        with pytest.raises(ValueError):
            tpr_at_fpr([0.5], [0.1], 0.0)
        with pytest.raises(ValueError):
            tpr_at_fpr([0.5], [0.1], 1e-3, mode="magic")


# ---------------------------------------------------------------- report


class TestReport:
    ACCS = {"African": 96.18, "Asian": 93.98, "Caucasian": 93.72, "Indian": 94.67}

    def test_table_row(self):
        rep = report({g: {"accuracy": a} for g, a in self.ACCS.items()})
        assert abs(rep.avg - 94.64) <= 0.01
        assert abs(rep.std - 1.11) <= 0.01
        # the population estimator would miss the published spread
        assert abs(statistics.pstdev(self.ACCS.values()) - 1.11) > 0.1

    def test_matches_reference(self):
        vals = list(self.ACCS.values())
        avg, std = mean_and_std(vals)
        assert abs(avg - statistics.fmean(vals)) <= 1e-9
        assert abs(std - statistics.stdev(vals)) <= 1e-9

    def test_single_group(self):
        rep = report({1: {"accuracy": 91.0}})
        assert rep.avg == 91.0 and rep.std == 0.0

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, vals, rnd):
        shuffled = list(vals)
        rnd.shuffle(shuffled)
        a = report({i: {"accuracy": v} for i, v in enumerate(vals)})
        b = report({i: {"accuracy": v} for i, v in enumerate(shuffled)})
        assert a.avg == pytest.approx(b.avg, abs=1e-9) and a.std == pytest.approx(b.std, abs=1e-9)
        if len(vals) > 1:
            assert a.std == pytest.approx(statistics.stdev(vals), abs=1e-9)

    def test_only_groups_with_accuracy(self):
        rep = report({1: {"accuracy": 90.0}, 2: {"tpr@fpr=0.001": 50.0}, 3: {"accuracy": 92.0}})
        assert rep.avg == 91.0
        assert rep.std == pytest.approx(math.sqrt(2))
        assert report({1: {"tpr@fpr=0.001": 1.0}}).avg is None

    def test_empty(self):
        with pytest.raises(ValueError):
            report({})

    def test_csv_and_json(self, tmp_path):
        rep = report({1: {"accuracy": 90.0, "tpr@fpr=0.001": 40.0}, 2: {"accuracy": 92.0}}, {"accuracy": "cv"})
        csv_path, json_path = rep.save(tmp_path / "rep")
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "group,metric,value,mode"
        assert "all,avg_accuracy,91.0,cv" in lines
        d = json.loads(json_path.read_text())
        assert d["per_group"]["1"]["tpr@fpr=0.001"] == 40.0 and d["avg"] == 91.0

    def test_evaluate_end_to_end(self):
        people, vecs = vector_world(40, 4, dim=16, seed=3)
        rfw = build_rfw_style_protocol(people, 20, rng=0)
        rep = evaluate(stack, rfw, loader=vecs, fpr_targets=(1e-1, 1e-2))
        assert set(rep.per_group) == {1, 2}
        assert all("accuracy" in m and "tpr@fpr=0.1" in m for m in rep.per_group.values())
        assert rep.modes["tpr@fpr=0.1"] == "exact"
        # 20 negatives resolve 1e-1 but not 1e-2
        assert set(rep.flags) == {"1@0.01", "2@0.01"}

    def test_evaluate_implicit_negatives(self):
        people, vecs = vector_world(40, 4, dim=16, seed=3)
        rb = build_rbweb_protocol(people, 20, 3, rng=0)
        rep = evaluate(stack, rb, loader=vecs, fpr_targets=(1e-2,), sweep=True)
        assert all(set(m) == {"tpr@fpr=0.01"} for m in rep.per_group.values())
        assert rep.avg is None and rep.modes["tpr@fpr=0.01"] == "sweep"
