"""Exact flat vector index with binary persistence.

Stores unit-normalized email embeddings and answers exact top-k
cosine queries (dot product on the unit sphere) with ID-based
exclusion. At per-user mailbox scale an exact scan beats approximate
structures and keeps retrieval semantics bit-for-bit reproducible;
the search seam (`_kernels.topk_dot`) would take an ANN backend later.

File format (little-endian), version 1:

    magic   4 bytes  b"PGIX"
    version u16
    dim     u32
    count   u64
    entries count * { id_len u16, id UTF-8, dim * f32 }
    crc32   u32 over all preceding bytes
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import _kernels
from .errors import (CorruptFile, DimensionMismatch, DuplicateId,
                     FormatVersionMismatch, NotNormalized, ZeroVector)

MAGIC = b"PGIX"
FORMAT_VERSION = 1
NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SearchHit:
    email_id: str
    score: float
    rank: int  # 1-based


class VectorIndex:
    """Flat exact-search index over float32 unit vectors.

    Vectors are quantized to float32 at add time so that save/load
    round-trips are bit-exact. Build single-threaded, then freeze();
    a frozen index is safe for unlimited concurrent readers.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self._ids: list[str] = []
        self._labels: list[str] = []
        self._rows: list[np.ndarray] = []
        self._id_pos: dict[str, int] = {}
        self._matrix: Optional[np.ndarray] = None
        self._frozen = False

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "VectorIndex":
        self._frozen = True
        self._materialize()
        return self

    def ids(self) -> list[str]:
        return list(self._ids)

    def __contains__(self, email_id: str) -> bool:
        return email_id in self._id_pos

    def add(self, email_id: str, vector: np.ndarray,
            label: str = "legitimate") -> None:
        """Insert one unit-normalized vector. Raises DuplicateId,
        NotNormalized, DimensionMismatch."""
        if self._frozen:
            raise RuntimeError("index is frozen")
        if email_id in self._id_pos:
            raise DuplicateId(f"id {email_id!r} already indexed")
        row = np.asarray(vector, dtype=np.float32)
        if row.ndim != 1 or row.shape[0] != self.dim:
            raise DimensionMismatch(
                f"vector shape {row.shape} does not match dim {self.dim}")
        norm = float(np.linalg.norm(row.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise NotNormalized(f"|v|={norm:.8f} for id {email_id!r}")
        self._id_pos[email_id] = len(self._ids)
        self._ids.append(email_id)
        self._labels.append(label)
        self._rows.append(row)
        self._matrix = None

    def _materialize(self) -> np.ndarray:
        if self._matrix is None:
            if self._rows:
                self._matrix = np.vstack(self._rows)
            else:
                self._matrix = np.empty((0, self.dim), dtype=np.float32)
        return self._matrix

    def search(self, query: np.ndarray, k: int,
               exclude: Optional[Iterable[str]] = None) -> list[SearchHit]:
        """Exact top-k by dot product (= cosine for unit vectors).

        Ties break by insertion order; excluded IDs never appear and the
        next-best entries fill in. Returns min(k, available) hits.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimensionMismatch(
                f"query shape {q.shape} does not match dim {self.dim}")
        if float(np.linalg.norm(q)) < 1e-12:
            raise ZeroVector("zero query vector rejected")
        matrix = self._materialize()
        excluded = np.zeros(len(self._ids), dtype=np.bool_)
        for email_id in exclude or ():
            pos = self._id_pos.get(email_id)
            if pos is not None:
                excluded[pos] = True
        idx, scores = _kernels.topk_dot(matrix, q, k, excluded)
        return [SearchHit(email_id=self._ids[i], score=float(s), rank=r + 1)
                for r, (i, s) in enumerate(zip(idx, scores))]

    # --- persistence --------------------------------------------------------

    def save(self, path) -> None:
        blob = bytearray()
        blob += MAGIC
        blob += struct.pack("<HIQ", FORMAT_VERSION, self.dim, len(self._ids))
        for email_id, row in zip(self._ids, self._rows):
            encoded = email_id.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"id too long: {email_id[:40]!r}...")
            blob += struct.pack("<H", len(encoded))
            blob += encoded
            blob += row.astype("<f4").tobytes()
        blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(blob))

    @classmethod
    def load(cls, path, expected_dim: Optional[int] = None) -> "VectorIndex":
        """Read an index file; FormatVersionMismatch on magic/version/dim
        disagreement, CorruptFile on truncation or checksum failure."""
        blob = Path(path).read_bytes()
        header_size = 4 + 2 + 4 + 8
        if len(blob) < header_size + 4:
            raise CorruptFile(f"{path}: truncated (got {len(blob)} bytes)")
        if blob[:4] != MAGIC:
            raise FormatVersionMismatch(f"{path}: bad magic {blob[:4]!r}")
        version, dim, count = struct.unpack_from("<HIQ", blob, 4)
        if version != FORMAT_VERSION:
            raise FormatVersionMismatch(
                f"{path}: format version {version}, expected {FORMAT_VERSION}")
        if expected_dim is not None and dim != expected_dim:
            raise FormatVersionMismatch(
                f"{path}: index dim {dim}, engine configured dim {expected_dim}")
        body, trailer = blob[:-4], blob[-4:]
        (crc_stored,) = struct.unpack("<I", trailer)
        if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
            raise CorruptFile(f"{path}: CRC32 mismatch")
        idx = cls(dim)
        offset = header_size
        vec_bytes = 4 * dim
        for _ in range(count):
            if offset + 2 > len(body):
                raise CorruptFile(f"{path}: entry table truncated")
            (id_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            if offset + id_len + vec_bytes > len(body):
                raise CorruptFile(f"{path}: entry table truncated")
            email_id = body[offset:offset + id_len].decode("utf-8")
            offset += id_len
            row = np.frombuffer(body, dtype="<f4", count=dim, offset=offset).copy()
            offset += vec_bytes
            if email_id in idx._id_pos:
                raise CorruptFile(f"{path}: duplicate id {email_id!r}")
            idx._id_pos[email_id] = len(idx._ids)
            idx._ids.append(email_id)
            idx._labels.append("legitimate")
            idx._rows.append(row)
        if offset != len(body):
            raise CorruptFile(f"{path}: {len(body) - offset} trailing bytes")
        return idx
