"""Exact top-K inner-product retrieval over L2-normalized frame embeddings.

Index file format (EMB1, little-endian): magic "EMB1", u32 count N,
u32 dim d, then N*d float32 row-major. Row i corresponds to manifest
line i; a text sidecar (`<file>.ids`, one integer per line) maps rows to
keyframe ids. Query embeddings use the same format with N=1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMB1_MAGIC = b"EMB1"
DEDUP_SIM_MAX = 0.9
OVERFETCH_FACTOR = 4
NORM_TOL = 1e-4


class FormatError(ValueError):
    """Raised when an embedding file violates the EMB1 format."""


def normalize(v: np.ndarray) -> np.ndarray:
    """L2-normalize so that inner products are cosine similarities."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.isfinite(v).all():
        raise ValueError("degenerate embedding: non-finite components")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("degenerate embedding: zero vector")
    return v / norm


@dataclass(frozen=True)
class Candidate:
    frame_id: int
    score: float


@dataclass(frozen=True)
class Query:
    kind: str  # "text" | "category" | "image"
    payload: str
    embedding: np.ndarray
    label: str | None = None  # category label; segmentation prompt for image queries

    def __post_init__(self):
        if self.kind not in ("text", "category", "image"):
            raise ValueError(f"unknown query kind {self.kind!r}")
        object.__setattr__(self, "embedding", normalize(self.embedding))

    @property
    def prompt_text(self) -> str:
        """Text used for segmentation / re-rank prompts."""
        if self.kind == "image":
            if not self.label:
                raise ValueError("image query needs a category label for prompting")
            return self.label
        return self.payload


class EmbeddingIndex:
    """One normalized vector per keyframe; supports exact full-scan search."""

    def __init__(self, vectors: np.ndarray, ids):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be (N, d)")
        ids = np.asarray(list(ids), dtype=np.int64)
        if len(ids) != len(vectors):
            raise ValueError(
                f"row/id count mismatch: {len(vectors)} vectors, {len(ids)} ids"
            )
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate keyframe ids in index")
        norms = np.linalg.norm(vectors, axis=1)
        if len(vectors) and np.abs(norms - 1.0).max() > 1e-5:
            vectors = vectors / norms[:, None]
        self.vectors = vectors
        self.ids = ids
        self._row_of = {int(i): r for r, i in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector_of(self, frame_id: int) -> np.ndarray:
        return self.vectors[self._row_of[int(frame_id)]]


def top_k(index: EmbeddingIndex, query: Query, k: int) -> list[Candidate]:
    """Exact arg-top-K by inner product; ties broken by smaller frame id."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(index) == 0:
        raise ValueError("empty index")
    scores = index.vectors @ query.embedding
    # lexsort: primary key is the last one; ascending -score == descending score
    order = np.lexsort((index.ids, -scores))[: min(k, len(index))]
    return [Candidate(int(index.ids[i]), float(scores[i])) for i in order]


def dedup(
    cands: list[Candidate], index: EmbeddingIndex, sim_max: float = DEDUP_SIM_MAX
) -> list[Candidate]:
    """Greedy near-duplicate removal in score order.

    A candidate is kept iff its cosine similarity to every already-kept
    candidate is <= sim_max; order is preserved.
    """
    kept: list[Candidate] = []
    kept_vecs: list[np.ndarray] = []
    for cand in cands:
        vec = index.vector_of(cand.frame_id)
        if all(float(vec @ kv) <= sim_max for kv in kept_vecs):
            kept.append(cand)
            kept_vecs.append(vec)
    return kept


def retrieve(
    index: EmbeddingIndex,
    query: Query,
    k: int,
    rerank_enabled: bool,
    sim_max: float = DEDUP_SIM_MAX,
) -> list[Candidate]:
    """Stage-1 retrieval: raw top-K when a re-ranker follows, otherwise the
    deduplicated feature-only path (overfetch then truncate)."""
    if rerank_enabled:
        return top_k(index, query, k)
    over = top_k(index, query, min(OVERFETCH_FACTOR * k, len(index)))
    return dedup(over, index, sim_max)[:k]


def write_emb1(path, vectors: np.ndarray, ids=None) -> None:
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
    if vectors.ndim != 2:
        raise ValueError("vectors must be (N, d)")
    n, d = vectors.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(vectors.astype("<f4").tobytes())
    if ids is not None:
        ids = list(ids)
        if len(ids) != n:
            raise ValueError("sidecar id count must match rows")
        Path(str(path) + ".ids").write_text("".join(f"{int(i)}\n" for i in ids))


def read_emb1(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != EMB1_MAGIC:
        raise FormatError(f"{path}: not an EMB1 file")
    n, d = struct.unpack("<II", data[4:12])
    expected = 12 + n * d * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    if n > 0 and d == 0:
        raise FormatError(f"{path}: zero dimension")
    vectors = np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d)
    return vectors.astype(np.float64)


def read_emb1_ids(path) -> list[int]:
    sidecar = Path(str(path) + ".ids")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing id sidecar {sidecar}")
    return [int(line) for line in sidecar.read_text().split()]


def check_emb1(path, expect_rows: int | None = None) -> tuple[int, int]:
    """Validate an EMB1 file: structure, finite rows, unit norms.

    Returns (N, d). Raises FormatError on any violation.
    """
    vectors = read_emb1(path)
    n, d = vectors.shape
    if expect_rows is not None and n != expect_rows:
        raise FormatError(f"{path}: {n} rows, expected {expect_rows}")
    if n:
        if not np.isfinite(vectors).all():
            raise FormatError(f"{path}: non-finite components")
        norms = np.linalg.norm(vectors, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOL:
            raise FormatError(f"{path}: rows not L2-normalized (max |norm-1| = {worst:.2e})")
    return n, d


def load_index(path) -> EmbeddingIndex:
    vectors = read_emb1(path)
    ids = read_emb1_ids(path)
    return EmbeddingIndex(vectors, ids)


def load_query_embedding(path) -> np.ndarray:
    vectors = read_emb1(path)
    if vectors.shape[0] != 1:
        raise FormatError(f"{path}: query file must contain exactly one row")
    return vectors[0]
