"""Exact flat dense-vector index with cosine top-k search and persistence.

Entries are unit-normalized float32 vectors, so cosine similarity reduces to
a dot product. Search is a full scan scored in float64; ties break by
insertion order, which keeps result sequences reproducible.

File format (all integers little-endian):
    magic  "RDRX" (4 bytes)
    version u32 = 1
    dim     u32
    count   u64
    count records of:
        id_len u16, id bytes (UTF-8),
        keyword_len u16, keyword bytes (UTF-8),
        dim x f32 components
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .chunking import UNIT_NORM_TOLERANCE, EmbeddedChunk
from .errors import (
    CorruptionError,
    DegenerateVectorError,
    DuplicateChunkError,
    FormatError,
    ShapeError,
    ValidationError,
)

MAGIC = b"RDRX"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U16 = struct.Struct("<H")


@dataclass(frozen=True)
class ScoredChunk:
    """One search hit: chunk id, cosine score, and the entry's keyword tag."""

    chunk_id: str
    score: float
    keyword: str


def cosine(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity of two equal-dimension, nonzero vectors."""
    a = np.asarray(u, dtype=np.float64).reshape(-1)
    b = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cosine dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


class FlatIndex:
    """Append-only exact index over (chunk_id, unit vector, keyword) entries.

    Single writer, many readers: insertions take the internal lock and are
    all-or-nothing, so searches never observe a partially inserted batch.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValidationError(f"index dim must be positive, got {dim}")
        self.dim = dim
        self._ids: list[str] = []
        self._keywords: list[str] = []
        self._rows: list[np.ndarray] = []  # float32, unit norm
        self._id_set: set[str] = set()
        self._matrix: np.ndarray | None = None  # float64 scan cache
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return len(self._ids)

    def entries(self) -> list[tuple[str, np.ndarray, str]]:
        """Snapshot of (chunk_id, vector, keyword) in insertion order."""
        with self._lock:
            return [
                (cid, row.copy(), kw)
                for cid, row, kw in zip(self._ids, self._rows, self._keywords)
            ]

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._id_set

    def insert(self, embedded: Sequence[EmbeddedChunk], keyword: str) -> None:
        """Append a batch of embedded chunks tagged with a keyword.

        The whole batch is validated before anything is appended; a rejected
        batch leaves the index untouched.
        """
        rows: list[np.ndarray] = []
        ids: list[str] = []
        for item in embedded:
            vec = np.asarray(item.vector, dtype=np.float32).reshape(-1)
            if vec.shape[0] != self.dim:
                raise ShapeError(
                    f"chunk {item.chunk.chunk_id} has dim {vec.shape[0]}, index dim {self.dim}"
                )
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
                raise ValidationError(
                    f"chunk {item.chunk.chunk_id} vector norm {norm} is not unit length"
                )
            ids.append(item.chunk.chunk_id)
            rows.append(vec)
        with self._lock:
            seen = set(self._id_set)
            for cid in ids:
                if cid in seen:
                    raise DuplicateChunkError(f"chunk id {cid} already indexed")
                seen.add(cid)
            self._ids.extend(ids)
            self._keywords.extend(keyword for _ in ids)
            self._rows.extend(rows)
            self._id_set = seen
            self._matrix = None

    def _scan_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._rows).astype(np.float64)
        return self._matrix

    def search_top_k(self, query: Sequence[float] | np.ndarray, k: int) -> list[ScoredChunk]:
        """Exact top-k by cosine similarity; ties keep insertion order."""
        if k <= 0:
            raise ValidationError(f"k must be positive, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ShapeError(f"query dim {q.shape[0]} does not match index dim {self.dim}")
        qnorm = float(np.linalg.norm(q))
        if qnorm == 0.0:
            raise DegenerateVectorError("cannot search with a zero query vector")
        with self._lock:
            if not self._ids:
                return []
            matrix = self._scan_matrix()
            ids = list(self._ids)
            keywords = list(self._keywords)
        scores = matrix @ (q / qnorm)
        order = np.argsort(-scores, kind="stable")[: min(k, len(ids))]
        return [ScoredChunk(ids[i], float(scores[i]), keywords[i]) for i in order]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with self._lock:
            parts = [_HEADER.pack(MAGIC, VERSION, self.dim, len(self._ids))]
            for cid, kw, row in zip(self._ids, self._keywords, self._rows):
                cid_b = cid.encode("utf-8")
                kw_b = kw.encode("utf-8")
                if len(cid_b) > 0xFFFF or len(kw_b) > 0xFFFF:
                    raise ValidationError(f"id/keyword too long to persist: {cid!r}")
                parts.append(_U16.pack(len(cid_b)))
                parts.append(cid_b)
                parts.append(_U16.pack(len(kw_b)))
                parts.append(kw_b)
                parts.append(np.ascontiguousarray(row, dtype="<f4").tobytes())
        path.write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise CorruptionError(f"{path}: file shorter than the header")
        magic, version, dim, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dim <= 0:
            raise CorruptionError(f"{path}: non-positive dim {dim}")
        index = cls(dim)
        offset = _HEADER.size
        vec_bytes = 4 * dim

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(data):
                raise CorruptionError(f"{path}: truncated at byte {offset}")
            piece = data[offset : offset + n]
            offset += n
            return piece

        for _ in range(count):
            (id_len,) = _U16.unpack(take(2))
            cid = take(id_len).decode("utf-8")
            (kw_len,) = _U16.unpack(take(2))
            kw = take(kw_len).decode("utf-8")
            row = np.frombuffer(take(vec_bytes), dtype="<f4").copy()
            if cid in index._id_set:
                raise CorruptionError(f"{path}: duplicate chunk id {cid}")
            index._ids.append(cid)
            index._keywords.append(kw)
            index._rows.append(row)
            index._id_set.add(cid)
        if offset != len(data):
            raise CorruptionError(f"{path}: {len(data) - offset} trailing bytes")
        return index


def save(index: FlatIndex, path: str | Path) -> None:
    index.save(path)


def load(path: str | Path) -> FlatIndex:
    return FlatIndex.load(path)
