"""Verification pair protocols: RB-WebFace style (implicit exhaustive negatives) and RFW style (mined negatives)."""
from __future__ import annotations

import dataclasses
import json
import os
from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np


class ProtocolError(ValueError):
    def __init__(self, group, reason: str):
        super().__init__(f"group {group!r}: {reason}")
        self.group = group
        self.reason = reason


def n_implicit_pairs(n: int) -> int:
    return n * (n - 1) // 2


def triangle_chunks(n: int, chunk_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """All (i, j) with i < j < n in row-major order, as index arrays of at most ``chunk_size`` pairs."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    buf_i, buf_j, filled = [], [], 0
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        while len(j):
            take = min(len(j), chunk_size - filled)
            buf_i.append(np.full(take, i))
            buf_j.append(j[:take])
            j = j[take:]
            filled += take
            if filled == chunk_size:
                yield np.concatenate(buf_i), np.concatenate(buf_j)
                buf_i, buf_j, filled = [], [], 0
    if filled:
        yield np.concatenate(buf_i), np.concatenate(buf_j)


@dataclasses.dataclass
class ImplicitNegatives:
    """All distinct pairs among one representative image per person."""

    group_id: object
    representative_images: list
    seed: int = 0

    def __len__(self) -> int:
        return n_implicit_pairs(len(self.representative_images))

    def iter_index_chunks(self, chunk_size: int = 1 << 20):
        return triangle_chunks(len(self.representative_images), chunk_size)

    def pairs(self) -> Iterator[tuple]:
        reps = self.representative_images
        for ii, jj in self.iter_index_chunks():
            for i, j in zip(ii, jj):
                yield reps[i], reps[j], self.group_id

    def to_json(self) -> str:
        return json.dumps({"group_id": self.group_id, "representative_images": list(map(str, self.representative_images)), "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "ImplicitNegatives":
        d = json.loads(text)
        return cls(d["group_id"], d["representative_images"], d["seed"])


@dataclasses.dataclass
class PairProtocol:
    """Positives are explicit (a, b, group) triples; negatives per group are a list of triples or an implicit descriptor."""

    positives: list
    negatives: dict
    seed: int = 0

    @property
    def groups(self) -> list:
        return sorted({g for _, _, g in self.positives} | set(self.negatives), key=str)

    def positives_of(self, group) -> list:
        return [p for p in self.positives if p[2] == group]

    def negatives_of(self, group):
        return self.negatives.get(group, [])

    def n_positives(self, group) -> int:
        return len(self.positives_of(group))

    def n_negatives(self, group) -> int:
        return len(self.negatives_of(group))

    def image_ids(self) -> list:
        """Every referenced image once, in first-use order."""
        seen = {}
        for a, b, _ in self.positives:
            seen.setdefault(a, None)
            seen.setdefault(b, None)
        for g in self.groups:
            neg = self.negatives_of(g)
            if isinstance(neg, ImplicitNegatives):
                for r in neg.representative_images:
                    seen.setdefault(r, None)
            else:
                for a, b, _ in neg:
                    seen.setdefault(a, None)
                    seen.setdefault(b, None)
        return list(seen)

    def write(self, directory: str | os.PathLike) -> Path:
        """``pairs.tsv`` for explicit pairs plus ``implicit_<group>.json`` per implicit negative set."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"{a}\t{b}\t1\t{g}" for a, b, g in self.positives]
        for g in self.groups:
            neg = self.negatives_of(g)
            if isinstance(neg, ImplicitNegatives):
                (directory / f"implicit_{g}.json").write_text(neg.to_json() + "\n", encoding="utf-8")
            else:
                lines += [f"{a}\t{b}\t0\t{gg}" for a, b, gg in neg]
        out = directory / "pairs.tsv"
        out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return out

    @classmethod
    def read(cls, directory: str | os.PathLike, seed: int = 0) -> "PairProtocol":
        directory = Path(directory)
        positives, negatives = [], {}
        for lineno, line in enumerate((directory / "pairs.tsv").read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4 or fields[2] not in ("0", "1"):
                raise ValueError(f"pairs.tsv line {lineno}: expected <path_a> <path_b> <0|1> <group_id>")
            a, b, label, g = fields
            g = int(g) if g.lstrip("-").isdigit() else g
            (positives if label == "1" else negatives.setdefault(g, [])).append((a, b, g))
        for path in sorted(directory.glob("implicit_*.json")):
            neg = ImplicitNegatives.from_json(path.read_text(encoding="utf-8"))
            negatives[neg.group_id] = neg
        return cls(positives, negatives, seed)


def _eligible_people(people: dict, min_images: int) -> list:
    return sorted((p for p, imgs in people.items() if len(imgs) >= min_images), key=str)


def _try_positive_indices(n: int, k: int, rng: np.random.Generator) -> list[tuple[int, int]] | None:
    pairs: set[tuple[int, int]] = set()
    out = []
    firsts = rng.permutation(n)
    for t in range(k):
        if t < n:
            a = int(firsts[t])
            free = [j for j in range(n) if j != a and (min(a, j), max(a, j)) not in pairs]
            if not free:
                return None  # earlier pairs used up every partner of ``a``
            b = free[int(rng.integers(len(free)))]
        else:
            free = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in pairs]
            a, b = free[int(rng.integers(len(free)))]
        pairs.add((min(a, b), max(a, b)))
        out.append((a, b))
    return out


def _person_positives(images: list, k: int, rng: np.random.Generator, person, group) -> list[tuple]:
    """``k`` distinct unordered pairs; no image is the first element twice while that is possible."""
    n = len(images)
    if n_implicit_pairs(n) < k:
        raise ProtocolError(group, f"person {person!r} has {n} images, too few for {k} distinct positive pairs")
    for _ in range(100):
        idx = _try_positive_indices(n, k, rng)
        if idx is not None:
            break
    else:
        # a cycle over a random order always satisfies the rule
        order = [int(i) for i in rng.permutation(n)]
        idx = [(order[t], order[(t + 1) % n]) for t in range(min(k, n))]
        used = {(min(a, b), max(a, b)) for a, b in idx}
        rest = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in used]
        idx += [rest[i] for i in rng.permutation(len(rest))[: k - len(idx)]]
    return [(images[a], images[b], group) for a, b in idx]


def build_rbweb_protocol(grouped_people: dict, n_people_per_group: int, pos_per_person: int = 5, rng=0) -> PairProtocol:
    """Per group: sample N people, ``pos_per_person`` positives each, and N representatives for implicit negatives.

    ``grouped_people`` maps group -> {person: [image ids]}.
    """
    seed = int(rng) if not isinstance(rng, np.random.Generator) else int(rng.integers(2**63))
    gen = np.random.default_rng(seed)
    positives, negatives = [], {}
    for group in sorted(grouped_people, key=str):
        people = grouped_people[group]
        eligible = _eligible_people(people, 2)
        if len(eligible) < n_people_per_group:
            raise ProtocolError(group, f"needs {n_people_per_group} people with >= 2 images, has {len(eligible)}")
        chosen = [eligible[i] for i in np.sort(gen.choice(len(eligible), n_people_per_group, replace=False))]
        reps = []
        for person in chosen:
            imgs = list(people[person])
            positives += _person_positives(imgs, pos_per_person, gen, person, group)
            reps.append(imgs[int(gen.integers(len(imgs)))])
        negatives[group] = ImplicitNegatives(group, reps, seed)
    return PairProtocol(positives, negatives, seed)


def random_similarity(seed: int = 0) -> Callable:
    """Stub similarity for negative mining: uniform noise, so mined negatives are a uniform sample."""
    gen = np.random.default_rng(seed)
    return lambda a, b: gen.random(len(a))


def build_rfw_style_protocol(grouped_people: dict, n_pairs: int, similarity_fn: Callable | None = None, rng=0, candidate_factor: int = 10) -> PairProtocol:
    """Per group: ``n_pairs`` positives and the ``n_pairs`` most similar of ``candidate_factor * n_pairs`` cross-person candidates.

    ``similarity_fn(list_a, list_b)`` returns one score per candidate pair.
    """
    seed = int(rng) if not isinstance(rng, np.random.Generator) else int(rng.integers(2**63))
    gen = np.random.default_rng(seed)
    similarity_fn = similarity_fn or random_similarity(seed)
    positives, negatives = [], {}
    for group in sorted(grouped_people, key=str):
        people = grouped_people[group]
        names = sorted(people, key=str)
        multi = [p for p in names if len(people[p]) >= 2]
        n_pos_avail = sum(n_implicit_pairs(len(people[p])) for p in multi)
        if n_pos_avail < n_pairs:
            raise ProtocolError(group, f"only {n_pos_avail} distinct positive pairs available, {n_pairs} requested")
        if len(names) < 2:
            raise ProtocolError(group, "negatives need at least two people")

        seen: set = set()
        group_pos = []
        while len(group_pos) < n_pairs:
            person = multi[int(gen.integers(len(multi)))]
            imgs = people[person]
            a, b = gen.choice(len(imgs), 2, replace=False)
            key = (person, min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                group_pos.append((imgs[a], imgs[b], group))
        positives += group_pos

        sizes = [len(people[p]) for p in names]
        n_neg_avail = (sum(sizes) ** 2 - sum(s * s for s in sizes)) // 2
        want = min(candidate_factor * n_pairs, n_neg_avail)
        if n_neg_avail < n_pairs:
            raise ProtocolError(group, f"only {n_neg_avail} distinct negative pairs available, {n_pairs} requested")
        cands, seen = [], set()
        while len(cands) < want:
            p, q = gen.choice(len(names), 2, replace=False)
            ia, ib = int(gen.integers(sizes[p])), int(gen.integers(sizes[q]))
            key = tuple(sorted([(p, ia), (q, ib)]))
            if key not in seen:
                seen.add(key)
                cands.append((people[names[p]][ia], people[names[q]][ib]))
        scores = np.asarray(similarity_fn([c[0] for c in cands], [c[1] for c in cands]), dtype=np.float64)
        top = np.argsort(-scores, kind="stable")[:n_pairs]
        negatives[group] = [(cands[i][0], cands[i][1], group) for i in top]
    return PairProtocol(positives, negatives, seed)
