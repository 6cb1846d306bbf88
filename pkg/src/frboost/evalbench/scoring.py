"""Cosine scoring of verification pairs with a once-per-image embedding cache."""
from __future__ import annotations

import os
import struct
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np

from frboost.evalbench.protocols import ImplicitNegatives, PairProtocol

CACHE_MAGIC = b"EMB1"


class ScoringError(RuntimeError):
    pass


def write_embedding_cache(path: str | os.PathLike, ids: list[str], embeddings: np.ndarray) -> None:
    """Header (magic, count, dim, reserved as u32 LE), float32 rows, then NUL-terminated UTF-8 ids."""
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or emb.shape[0] != len(ids):
        raise ValueError("embeddings must be count x dim, one row per id")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", emb.shape[0], emb.shape[1], 0))
        fh.write(emb.tobytes())
        for i in ids:
            fh.write(str(i).encode("utf-8") + b"\0")


def read_embedding_cache(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not an embedding cache")
    count, dim, _ = struct.unpack("<III", raw[4:16])
    end = 16 + 4 * count * dim
    emb = np.frombuffer(raw[16:end], dtype="<f4").reshape(count, dim).astype(np.float32)
    ids = raw[end:].split(b"\0")[:count]
    if len(ids) != count:
        raise ValueError(f"{path}: truncated id table")
    return [i.decode("utf-8") for i in ids], emb


class EmbeddingTable:
    """Unit-normalised embeddings (float64) keyed by image id."""

    def __init__(self, ids, embeddings: np.ndarray):
        emb = np.asarray(embeddings, dtype=np.float64)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        self.unit = emb / np.where(norms > 0, norms, 1.0)
        self.raw = np.asarray(embeddings, dtype=np.float32)
        self.index = {str(i): k for k, i in enumerate(ids)}
        self.ids = [str(i) for i in ids]

    def rows(self, ids) -> np.ndarray:
        try:
            return np.fromiter((self.index[str(i)] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as err:
            raise ScoringError(f"no embedding for image {err.args[0]!r}") from None

    def save(self, path) -> None:
        write_embedding_cache(path, self.ids, self.raw)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls(*read_embedding_cache(path))


def cosine_rows(unit: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Row-wise dot products; each row is reduced on its own, so chunking cannot change a score."""
    return (unit[i] * unit[j]).sum(axis=1)


def embed_images(
    embed_fn: Callable,
    ids: list,
    loader: Callable | Mapping | None = None,
    batch_size: int = 256,
) -> EmbeddingTable:
    """Embed every id once. ``loader`` maps an id to an image (default: read the file at that path)."""
    from frboost.prior_data import IngestionError, read_rgb

    if loader is None:
        def loader(i):
            return read_rgb(i)
    get = loader.__getitem__ if isinstance(loader, Mapping) else loader
    chunks = []
    for start in range(0, len(ids), batch_size):
        batch = []
        for i in ids[start: start + batch_size]:
            try:
                batch.append(get(i))
            except (KeyError, OSError, IngestionError) as err:
                raise ScoringError(f"cannot load image {i!r}: {err}") from None
        out = embed_fn(np.stack(batch))
        chunks.append(np.asarray(out.detach().cpu() if hasattr(out, "detach") else out, dtype=np.float32))
    dim = chunks[0].shape[1] if chunks else 0
    return EmbeddingTable(ids, np.concatenate(chunks) if chunks else np.zeros((0, dim), np.float32))


def backbone_embedder(backbone) -> Callable:
    from frboost.facerec.backbone import embed

    return lambda images: embed(backbone, images)


def _explicit_scores(table: EmbeddingTable, pairs: list, chunk_size: int) -> np.ndarray:
    out = np.empty(len(pairs), dtype=np.float64)
    for s in range(0, len(pairs), chunk_size):
        chunk = pairs[s: s + chunk_size]
        try:
            i = table.rows([p[0] for p in chunk])
            j = table.rows([p[1] for p in chunk])
        except ScoringError as err:
            bad = next(p for p in chunk if str(p[0]) not in table.index or str(p[1]) not in table.index)
            raise ScoringError(f"pair ({bad[0]!r}, {bad[1]!r}) in group {bad[2]!r}: {err}") from None
        out[s: s + len(chunk)] = cosine_rows(table.unit, i, j)
    return out


def stream_implicit_scores(table: EmbeddingTable, neg: ImplicitNegatives, chunk_size: int = 1 << 20) -> Iterator[np.ndarray]:
    """Scores of all N(N-1)/2 representative pairs, chunk by chunk, never all in memory."""
    reps = table.rows(neg.representative_images)
    for ii, jj in neg.iter_index_chunks(chunk_size):
        yield cosine_rows(table.unit, reps[ii], reps[jj])


def score_pairs(
    embedder,
    protocol: PairProtocol,
    chunk_size: int = 1 << 16,
    loader: Callable | Mapping | None = None,
    table: EmbeddingTable | None = None,
    materialize_implicit: bool = True,
) -> dict:
    """group -> (positive scores, negative scores).

    ``embedder`` is a backbone, a callable on image batches, or ``None`` when
    ``table`` already holds every embedding. Implicit negatives come back as a
    materialised array, or as a zero-argument callable returning a fresh
    chunk stream when ``materialize_implicit`` is false.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if table is None:
        fn = embedder if not hasattr(embedder, "trunk") else backbone_embedder(embedder)
        table = embed_images(fn, protocol.image_ids(), loader)
    out = {}
    for g in protocol.groups:
        pos = _explicit_scores(table, protocol.positives_of(g), chunk_size)
        neg = protocol.negatives_of(g)
        if isinstance(neg, ImplicitNegatives):
            if materialize_implicit:
                parts = list(stream_implicit_scores(table, neg, chunk_size))
                neg_scores = np.concatenate(parts) if parts else np.zeros(0)
            else:
                neg_scores = (lambda neg=neg: stream_implicit_scores(table, neg, chunk_size))
        else:
            neg_scores = _explicit_scores(table, neg, chunk_size)
        out[g] = (pos, neg_scores)
    return out
