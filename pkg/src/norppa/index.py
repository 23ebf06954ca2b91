"""Persistent identity-embedding database with exact top-k cosine retrieval.

Index file format (little-endian): magic "NRPI", u32 version (=1), u32 entry
count, u32 embedding dim, u32 config-JSON length + UTF-8 payload; then per
entry: three u16-length-prefixed UTF-8 strings (individual id, image id,
descriptor ref — empty meaning none), u8 provenance, f64 added-at, and dim
f64 embedding values.  A JSON sidecar (same path + ".json") mirrors the
metadata for human inspection.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, StageError

MAGIC = b"NRPI"
VERSION = 1

PROVENANCE_INITIAL = "initial"
PROVENANCE_CONFIRMED = "expert-confirmed"
_PROVENANCE_CODES = {PROVENANCE_INITIAL: 0, PROVENANCE_CONFIRMED: 1}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_CODES.items()}


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - dot(a, b), clamped to [0, 2]; inputs must be unit vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise StageError("index", f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.clip(1.0 - np.dot(a, b), 0.0, 2.0))


@dataclass
class DatabaseEntry:
    individual_id: str
    image_id: str
    embedding: np.ndarray
    descriptor_ref: str | None = None
    added_at: float = 0.0
    provenance: str = PROVENANCE_INITIAL

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        if self.provenance not in _PROVENANCE_CODES:
            raise ValueError(f"unknown provenance: {self.provenance}")


@dataclass
class RankedMatch:
    entry: DatabaseEntry
    distance: float
    rank: int


@dataclass
class EvalReport:
    """Top-k accuracy curve with per-individual top-1 confusion counts."""

    k_max: int
    accuracies: list[float]  # accuracies[i] is accuracy at k = i + 1
    confusion: dict[str, dict[str, int]]
    query_count: int
    config: dict | None = None

    def accuracy(self, k: int) -> float:
        return self.accuracies[k - 1]

    def to_dict(self) -> dict:
        return {
            "k-max": self.k_max,
            "accuracy": {str(k + 1): self.accuracies[k] for k in range(self.k_max)},
            "confusion": self.confusion,
            "query-count": self.query_count,
            "config": self.config,
        }


class IdentityIndex:
    """Exhaustive-scan cosine index; many readers, single writer."""

    def __init__(self, config: dict | None = None):
        self._lock = threading.RLock()
        self._entries: list[DatabaseEntry] = []
        self._matrix: np.ndarray | None = None  # (N, dim) snapshot-consistent
        self._keys: set[tuple[str, str]] = set()
        self.config = config

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def dim(self) -> int | None:
        with self._lock:
            return None if self._matrix is None else self._matrix.shape[1]

    def entries(self) -> tuple[DatabaseEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def individuals(self) -> list[str]:
        with self._lock:
            return sorted({e.individual_id for e in self._entries})

    def images_of(self, individual_id: str) -> list[str]:
        with self._lock:
            return sorted(e.image_id for e in self._entries if e.individual_id == individual_id)

    def add_entry(self, entry: DatabaseEntry) -> None:
        with self._lock:
            key = (entry.individual_id, entry.image_id)
            if key in self._keys:
                raise StageError("index", f"duplicate key: {entry.individual_id}/{entry.image_id}")
            if self._matrix is not None and entry.embedding.shape[0] != self._matrix.shape[1]:
                raise StageError(
                    "index",
                    f"dimension mismatch: index dim {self._matrix.shape[1]}, entry {entry.embedding.shape[0]}",
                )
            norm = float(np.linalg.norm(entry.embedding))
            if abs(norm - 1.0) > 1e-6:
                raise StageError("index", "embedding must be unit norm")
            row = entry.embedding[None, :]
            # Replace (not mutate) the matrix so in-flight queries keep their snapshot.
            self._matrix = row.copy() if self._matrix is None else np.vstack([self._matrix, row])
            self._entries.append(entry)
            self._keys.add(key)

    def _snapshot(self) -> tuple[tuple[DatabaseEntry, ...], np.ndarray]:
        with self._lock:
            if not self._entries:
                raise StageError("index", "empty database")
            return tuple(self._entries), self._matrix

    @staticmethod
    def _ordered(entries: tuple[DatabaseEntry, ...], matrix: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != matrix.shape[1]:
            raise StageError("index", f"length mismatch: {q.shape[0]} vs {matrix.shape[1]}")
        distances = np.clip(1.0 - matrix @ q, 0.0, 2.0)
        image_ids = np.array([e.image_id for e in entries])
        individual_ids = np.array([e.individual_id for e in entries])
        order = np.lexsort((image_ids, individual_ids, distances))
        return order, distances

    def query_topk(self, query: np.ndarray, k: int) -> list[RankedMatch]:
        """The k nearest entries by cosine distance, deterministic ties."""
        if k < 1:
            raise StageError("index", "k must be at least 1")
        entries, matrix = self._snapshot()
        order, distances = self._ordered(entries, matrix, query)
        return [
            RankedMatch(entry=entries[i], distance=float(distances[i]), rank=r + 1)
            for r, i in enumerate(order[:k])
        ]

    def query_top_individuals(self, query: np.ndarray, k: int) -> list[RankedMatch]:
        """Top-k distinct individuals; each ranked by its best image."""
        if k < 1:
            raise StageError("index", "k must be at least 1")
        entries, matrix = self._snapshot()
        order, distances = self._ordered(entries, matrix, query)
        out: list[RankedMatch] = []
        seen: set[str] = set()
        for i in order:
            ind = entries[i].individual_id
            if ind in seen:
                continue
            seen.add(ind)
            out.append(RankedMatch(entry=entries[i], distance=float(distances[i]), rank=len(out) + 1))
            if len(out) == k:
                break
        return out

    def evaluate_topk(self, queries: list[tuple[np.ndarray, str]], k_max: int) -> EvalReport:
        """Accuracy(k) for k=1..k_max with individuals deduplicated by best image."""
        entries, matrix = self._snapshot()
        hits = np.zeros(k_max, dtype=np.int64)
        confusion: dict[str, dict[str, int]] = {}
        for embedding, true_id in queries:
            order, _ = self._ordered(entries, matrix, embedding)
            seen: set[str] = set()
            true_rank = None
            top1 = None
            for i in order:
                ind = entries[i].individual_id
                if ind in seen:
                    continue
                seen.add(ind)
                if top1 is None:
                    top1 = ind
                if ind == true_id:
                    true_rank = len(seen)
                    break
                if len(seen) >= k_max and top1 is not None:
                    break
            if true_rank is not None and true_rank <= k_max:
                hits[true_rank - 1 :] += 1
            row = confusion.setdefault(true_id, {})
            row[top1] = row.get(top1, 0) + 1
        q = max(len(queries), 1)
        return EvalReport(
            k_max=k_max,
            accuracies=[float(h) / q for h in hits],
            confusion=confusion,
            query_count=len(queries),
            config=self.config,
        )

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with self._lock:
            entries = list(self._entries)
            config = self.config
        dim = entries[0].embedding.shape[0] if entries else 0
        config_blob = json.dumps(config, sort_keys=True).encode() if config is not None else b""
        parts = [
            MAGIC,
            np.array([VERSION, len(entries), dim, len(config_blob)], dtype="<u4").tobytes(),
            config_blob,
        ]
        for e in entries:
            for text in (e.individual_id, e.image_id, e.descriptor_ref or ""):
                data = text.encode()
                parts.append(np.array([len(data)], dtype="<u2").tobytes())
                parts.append(data)
            parts.append(bytes([_PROVENANCE_CODES[e.provenance]]))
            parts.append(np.array([e.added_at], dtype="<f8").tobytes())
            parts.append(e.embedding.astype("<f8").tobytes())
        blob = b"".join(parts)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        sidecar = {
            "version": VERSION,
            "count": len(entries),
            "dim": dim,
            "config": config,
            "entries": [
                {
                    "individual-id": e.individual_id,
                    "image-id": e.image_id,
                    "descriptor-ref": e.descriptor_ref,
                    "provenance": e.provenance,
                    "added-at": e.added_at,
                }
                for e in entries
            ],
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "IdentityIndex":
        blob = Path(path).read_bytes()
        if len(blob) < 20 or blob[:4] != MAGIC:
            raise FormatError("corrupt file: bad magic")
        version, count, dim, config_len = (int(v) for v in np.frombuffer(blob[4:20], dtype="<u4"))
        if version != VERSION:
            raise FormatError(f"unsupported version: {version}")
        off = 20
        config = None
        if config_len:
            try:
                config = json.loads(blob[off : off + config_len].decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"corrupt file: bad config block: {exc}") from exc
            off += config_len

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(blob):
                raise FormatError("corrupt file: truncated payload")
            out = blob[off : off + n]
            off += n
            return out

        index = cls(config=config)
        for _ in range(count):
            texts = []
            for _ in range(3):
                (length,) = np.frombuffer(take(2), dtype="<u2")
                texts.append(take(int(length)).decode())
            provenance_code = take(1)[0]
            if provenance_code not in _PROVENANCE_NAMES:
                raise FormatError(f"corrupt file: unknown provenance {provenance_code}")
            (added_at,) = np.frombuffer(take(8), dtype="<f8")
            embedding = np.frombuffer(take(8 * dim), dtype="<f8").copy()
            index.add_entry(
                DatabaseEntry(
                    individual_id=texts[0],
                    image_id=texts[1],
                    embedding=embedding,
                    descriptor_ref=texts[2] or None,
                    added_at=float(added_at),
                    provenance=_PROVENANCE_NAMES[provenance_code],
                )
            )
        return index


def make_entry(
    individual_id: str,
    image_id: str,
    embedding: np.ndarray,
    descriptor_ref: str | None = None,
    provenance: str = PROVENANCE_INITIAL,
) -> DatabaseEntry:
    """Entry with the creation time stamped now."""
    return DatabaseEntry(
        individual_id=individual_id,
        image_id=image_id,
        embedding=embedding,
        descriptor_ref=descriptor_ref,
        added_at=time.time(),
        provenance=provenance,
    )
