"""Incident embedding store and the three-step similar-incident matcher.

Entries are partitioned by organization; matching never crosses org
boundaries. Each (org, incident_hash, grade_tag) key holds at most `cap`
entries (most recent win), and retrieval walks three steps: exact hash with
the same triage recommendation, exact hash with a differing one, then cosine
similarity above a cutoff. Exact matches always outrank cosine matches.

Persistence is an append-only little-endian record log per org partition
(format "SDEB" v1): upsert and delete records replayed into an in-memory
index on open. Layout per upsert record after the 1-byte type tag:
incident_id (u16 length + utf-8), incident_hash (40 ascii bytes), grade tag
code (u8), predicted grade code (u8), timestamp (f8 epoch seconds), then k
float64 embedding values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .telemetry import Grade

STORE_MAGIC = b"SDEB"
STORE_FORMAT_VERSION = 1

_TAG_CODES = {"ungraded": 0, "TP": 1, "FP": 2, "BP": 3}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}
_REC_UPSERT = 1
_REC_DELETE = 2


class MatchKind(str, Enum):
    EXACT_HASH_SAME_GRADE = "exact_hash_same_grade"
    EXACT_HASH_ANY_GRADE = "exact_hash_any_grade"
    COSINE = "cosine"


_KIND_PRIORITY = {
    MatchKind.EXACT_HASH_SAME_GRADE: 0,
    MatchKind.EXACT_HASH_ANY_GRADE: 1,
    MatchKind.COSINE: 2,
}


@dataclass(frozen=True, eq=False)
class EmbeddingEntry:
    org_id: str
    incident_id: str
    incident_hash: str
    grade_tag: str  # "TP" | "FP" | "BP" | "ungraded"
    embedding: np.ndarray
    timestamp: datetime
    predicted_grade: Optional[str] = None  # sidecar: lets predictions join step 1

    def match_grade(self) -> Optional[str]:
        if self.grade_tag != "ungraded":
            return self.grade_tag
        return self.predicted_grade


@dataclass(frozen=True)
class SimilarMatch:
    incident_id: str
    kind: MatchKind
    score: float  # cosine; 1.0 for exact kinds
    timestamp: datetime


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two vectors; zero vectors score 0 by definition."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _ts_to_epoch(ts: datetime) -> float:
    return ts.astimezone(timezone.utc).timestamp()


def _epoch_to_ts(value: float) -> datetime:
    return datetime.fromtimestamp(value, tz=timezone.utc)


class EmbeddingStore:
    """Single-writer embedding store with per-org append logs.

    The in-memory index maps org -> incident_id -> entry and is rebuilt by
    replaying the logs on open, so a reopened store is byte-for-byte
    equivalent to the one that wrote it.
    """

    def __init__(self, root: str | Path, k: int):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.k = int(k)
        self.rejected_count = 0
        self._by_org: dict[str, dict[str, EmbeddingEntry]] = {}
        self._replay()

    # -- persistence ---------------------------------------------------------

    def _org_path(self, org_id: str) -> Path:
        return self.root / (org_id.encode("utf-8").hex() + ".emblog")

    def _replay(self) -> None:
        for path in sorted(self.root.glob("*.emblog")):
            org_id = bytes.fromhex(path.stem).decode("utf-8")
            entries: dict[str, EmbeddingEntry] = {}
            raw = path.read_bytes()
            magic, fmt, k = struct.unpack_from("<4sHI", raw, 0)
            if magic != STORE_MAGIC or fmt != STORE_FORMAT_VERSION:
                raise ValueError(f"not an embedding log: {path}")
            if k != self.k:
                raise ValueError(f"store dimension mismatch: log {path} has k={k}, store expects {self.k}")
            offset = struct.calcsize("<4sHI")
            while offset < len(raw):
                (rec_type,) = struct.unpack_from("<B", raw, offset)
                offset += 1
                (id_len,) = struct.unpack_from("<H", raw, offset)
                offset += 2
                incident_id = raw[offset:offset + id_len].decode("utf-8")
                offset += id_len
                if rec_type == _REC_DELETE:
                    entries.pop(incident_id, None)
                    continue
                digest = raw[offset:offset + 40].decode("ascii")
                offset += 40
                tag_code, pred_code = struct.unpack_from("<BB", raw, offset)
                offset += 2
                (epoch,) = struct.unpack_from("<d", raw, offset)
                offset += 8
                vector = np.frombuffer(raw, dtype="<f8", count=self.k, offset=offset).copy()
                offset += 8 * self.k
                entries[incident_id] = EmbeddingEntry(
                    org_id=org_id,
                    incident_id=incident_id,
                    incident_hash=digest,
                    grade_tag=_CODE_TAGS[tag_code],
                    embedding=vector,
                    timestamp=_epoch_to_ts(epoch),
                    predicted_grade=_CODE_TAGS[pred_code] if pred_code else None,
                )
            if entries:
                self._by_org[org_id] = entries

    def _append(self, org_id: str, payload: bytes) -> None:
        path = self._org_path(org_id)
        if not path.exists():
            path.write_bytes(struct.pack("<4sHI", STORE_MAGIC, STORE_FORMAT_VERSION, self.k))
        with path.open("ab") as fh:
            fh.write(payload)

    def _upsert_bytes(self, entry: EmbeddingEntry) -> bytes:
        raw_id = entry.incident_id.encode("utf-8")
        pred = _TAG_CODES.get(entry.predicted_grade or "ungraded", 0)
        return b"".join([
            struct.pack("<BH", _REC_UPSERT, len(raw_id)),
            raw_id,
            entry.incident_hash.encode("ascii"),
            struct.pack("<BB", _TAG_CODES[entry.grade_tag], pred),
            struct.pack("<d", _ts_to_epoch(entry.timestamp)),
            np.ascontiguousarray(entry.embedding, dtype="<f8").tobytes(),
        ])

    def _delete_bytes(self, incident_id: str) -> bytes:
        raw_id = incident_id.encode("utf-8")
        return struct.pack("<BH", _REC_DELETE, len(raw_id)) + raw_id

    # -- operations ----------------------------------------------------------

    def __len__(self) -> int:
        return sum(len(entries) for entries in self._by_org.values())

    def entries_for_org(self, org_id: str) -> list[EmbeddingEntry]:
        return list(self._by_org.get(org_id, {}).values())

    def get(self, org_id: str, incident_id: str) -> Optional[EmbeddingEntry]:
        return self._by_org.get(org_id, {}).get(incident_id)

    def key_size(self, org_id: str, incident_hash: str, grade_tag: str) -> int:
        return sum(
            1 for e in self._by_org.get(org_id, {}).values()
            if e.incident_hash == incident_hash and e.grade_tag == grade_tag
        )

    def upsert(self, entries: Iterable[EmbeddingEntry], cap: int = 5) -> int:
        """Insert or replace entries; returns the accepted count.

        Re-upserting an incident_id replaces its entry (idempotent). After
        each insert the (org, hash, grade_tag) key is trimmed to its `cap`
        most recent entries. Entries with the wrong embedding width are
        rejected and counted, never raised.
        """
        if cap < 1:
            raise ValueError("cap must be >= 1")
        accepted = 0
        for entry in entries:
            if entry.grade_tag not in _TAG_CODES:
                raise ValueError(f"unknown grade tag {entry.grade_tag!r}")
            if len(entry.embedding) != self.k:
                self.rejected_count += 1
                continue
            org = self._by_org.setdefault(entry.org_id, {})
            log_chunks = [self._upsert_bytes(entry)]
            org[entry.incident_id] = entry

            key_members = [
                e for e in org.values()
                if e.incident_hash == entry.incident_hash and e.grade_tag == entry.grade_tag
            ]
            if len(key_members) > cap:
                key_members.sort(key=lambda e: (_ts_to_epoch(e.timestamp), e.incident_id), reverse=True)
                for evicted in key_members[cap:]:
                    del org[evicted.incident_id]
                    log_chunks.append(self._delete_bytes(evicted.incident_id))
            self._append(entry.org_id, b"".join(log_chunks))
            accepted += 1
        return accepted

    def prune_history(self, horizon: timedelta, now: datetime) -> int:
        """Drop every entry strictly older than `now - horizon`."""
        floor = now - horizon
        removed = 0
        for org_id, entries in self._by_org.items():
            stale = [e for e in entries.values() if e.timestamp < floor]
            if not stale:
                continue
            chunks = []
            for entry in stale:
                del entries[entry.incident_id]
                chunks.append(self._delete_bytes(entry.incident_id))
                removed += 1
            self._append(org_id, b"".join(chunks))
        return removed


def find_similar(
    store: EmbeddingStore,
    org_id: str,
    incident_hash: str,
    query: np.ndarray,
    grade_rec: Optional[str],
    k_max: int = 5,
    cutoff: float = 0.9,
    horizon: timedelta = timedelta(days=180),
    now: Optional[datetime] = None,
    exclude_incident_id: Optional[str] = None,
) -> list[SimilarMatch]:
    """Rank up to k_max historical neighbors for one incident.

    Candidates are restricted to the same organization and to the retention
    horizon, and the query incident itself never matches. Result order is
    (match kind, cosine score desc, timestamp desc, incident_id).
    """
    query = np.asarray(query, dtype=np.float64)
    if len(query) != store.k:
        raise ValueError(f"query has dimension {len(query)}, store expects {store.k}")
    if now is None:
        now = datetime.now(tz=timezone.utc)
    floor = now - horizon

    candidates = [
        e for e in store.entries_for_org(org_id)
        if e.timestamp >= floor and e.incident_id != exclude_incident_id
    ]

    def recency_key(entry: EmbeddingEntry):
        return (-_ts_to_epoch(entry.timestamp), entry.incident_id)

    matches: list[SimilarMatch] = []
    taken: set[str] = set()

    same_hash = [e for e in candidates if e.incident_hash == incident_hash]
    step1 = sorted((e for e in same_hash if e.match_grade() == grade_rec), key=recency_key)
    for entry in step1[:k_max]:
        matches.append(SimilarMatch(entry.incident_id, MatchKind.EXACT_HASH_SAME_GRADE, 1.0, entry.timestamp))
        taken.add(entry.incident_id)

    if len(matches) < k_max:
        step2 = sorted((e for e in same_hash if e.incident_id not in taken), key=recency_key)
        for entry in step2[:k_max - len(matches)]:
            matches.append(SimilarMatch(entry.incident_id, MatchKind.EXACT_HASH_ANY_GRADE, 1.0, entry.timestamp))
            taken.add(entry.incident_id)

    if len(matches) < k_max:
        scored = []
        for entry in candidates:
            if entry.incident_id in taken:
                continue
            score = cosine_similarity(query, entry.embedding)
            if score >= cutoff:
                scored.append((entry, score))
        scored.sort(key=lambda pair: (-pair[1], -_ts_to_epoch(pair[0].timestamp), pair[0].incident_id))
        for entry, score in scored[:k_max - len(matches)]:
            matches.append(SimilarMatch(entry.incident_id, MatchKind.COSINE, score, entry.timestamp))

    return matches
