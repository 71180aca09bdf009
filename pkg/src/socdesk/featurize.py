"""Feature engineering: numeric extraction, one-hot encoding, incidents.

An alert turns into a fixed-width numeric vector (the feature manifest) plus
a sparse set of one-hot indices over six categorical columns. High-cardinality
columns are compressed before encoding: values seen on fewer than `c`
training alerts share a per-column generic bucket, which also absorbs values
never seen at fit time. Encoded alerts aggregate into incidents by summing
numeric columns and counting one-hot hits.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .telemetry import EPOCH, ENTITY_KINDS, Action, AlertRecord, EntityKind, Grade

MANIFEST_VERSION = "fm-v1"

_DISTINCT_DIMENSIONS: tuple[tuple[str, object], ...] = (
    ("device", lambda e: e.device_identity()),
    ("ip", lambda e: e.ip_address),
    ("url", lambda e: e.url),
    ("account", lambda e: e.account_identity()),
    ("sha256", lambda e: e.sha256),
    ("file_name", lambda e: e.file_name),
    ("registry_key", lambda e: e.registry_key),
    ("application", lambda e: e.application_identity()),
    ("resource", lambda e: e.resource_id_name),
    ("email_cluster", lambda e: e.email_cluster_id),
    ("network_message", lambda e: e.network_message_id),
    ("country", lambda e: e.country_code),
    ("state", lambda e: e.state),
    ("city", lambda e: e.city),
)


def _feature_names() -> list[str]:
    names = ["evidence_count"]
    names += [f"distinct_{name}" for name, _ in _DISTINCT_DIMENSIONS]
    names += [f"evtype_{kind.value}" for kind in ENTITY_KINDS]
    names += [
        "mitre_technique_count",
        "suspicious_evidence_count",
        "malicious_evidence_count",
        "severity_ordinal",
        "hour_sin",
        "hour_cos",
        "dow_sin",
        "dow_cos",
    ]
    return names


@dataclass(frozen=True)
class FeatureManifest:
    """Ordered numeric feature names; the order is fixed per version."""

    version: str = MANIFEST_VERSION
    names: tuple[str, ...] = tuple(_feature_names())

    def __len__(self) -> int:
        return len(self.names)


MANIFEST_V1 = FeatureManifest()

_N_DISTINCT = len(_DISTINCT_DIMENSIONS)
_ENTITY_INDEX = {kind: i for i, kind in enumerate(ENTITY_KINDS)}
_CYCLIC_SLICE = slice(len(MANIFEST_V1) - 4, len(MANIFEST_V1))


def extract_numeric_features(alert: AlertRecord, manifest: FeatureManifest = MANIFEST_V1) -> np.ndarray:
    """Engineered numeric vector for one alert. Total: never raises.

    All entries are finite and >= 0 except the four cyclic time encodings,
    which lie in [-1, 1].
    """
    if manifest.version != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.version!r}")
    out = np.zeros(len(manifest), dtype=np.float64)
    out[0] = len(alert.evidence)

    distinct: list[set] = [set() for _ in range(_N_DISTINCT)]
    suspicious = 0
    malicious = 0
    for evidence in alert.evidence:
        for i, (_, getter) in enumerate(_DISTINCT_DIMENSIONS):
            value = getter(evidence)
            if value:
                distinct[i].add(value)
        idx = _ENTITY_INDEX.get(evidence.entity_type)
        if idx is not None:
            out[1 + _N_DISTINCT + idx] += 1.0
        level = (evidence.suspicion_level or "").lower()
        verdict = (evidence.last_verdict or "").lower()
        if level == "suspicious" or verdict == "suspicious":
            suspicious += 1
        if verdict == "malicious":
            malicious += 1

    for i, values in enumerate(distinct):
        out[1 + i] = len(values)

    base = 1 + _N_DISTINCT + len(ENTITY_KINDS)
    out[base] = len(alert.mitre_techniques)
    out[base + 1] = suspicious
    out[base + 2] = malicious
    out[base + 3] = alert.severity

    ts = alert.timestamp or EPOCH
    hour_angle = 2.0 * math.pi * ts.hour / 24.0
    dow_angle = 2.0 * math.pi * ts.weekday() / 7.0
    out[base + 4] = math.sin(hour_angle)
    out[base + 5] = math.cos(hour_angle)
    out[base + 6] = math.sin(dow_angle)
    out[base + 7] = math.cos(dow_angle)
    return out


# Categorical columns, in fixed encode order. The technique column is a
# multi-valued family: one index per technique on the alert.
CATEGORICAL_COLUMNS: tuple[str, ...] = (
    "org_id", "detector_id", "product_id", "category", "severity", "mitre",
)


def _column_values(alert: AlertRecord, column: str) -> tuple[str, ...]:
    if column == "org_id":
        return (alert.org_id,)
    if column == "detector_id":
        return (alert.detector_id,)
    if column == "product_id":
        return (alert.product_id,)
    if column == "category":
        return (alert.category,)
    if column == "severity":
        return (str(alert.severity),)
    if column == "mitre":
        return tuple(sorted(alert.mitre_techniques))
    raise KeyError(column)


@dataclass
class EncoderModel:
    """Vocabularies for the six categorical columns plus the numeric manifest.

    Every vocabulary value appeared on at least `min_cardinality` training
    alerts; everything else maps to the column's generic bucket, so encoding
    is total. The encode dimension (one-hot width plus numeric width) is
    constant for the model's lifetime.
    """

    vocabularies: dict[str, dict[str, int]]
    min_cardinality: int
    manifest: FeatureManifest = MANIFEST_V1
    format_version: str = "enc-v1"
    _offsets: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        offset = 0
        for column in CATEGORICAL_COLUMNS:
            self._offsets[column] = offset
            offset += len(self.vocabularies[column]) + 1  # +1 generic bucket
        self._ohe_dim = offset

    @property
    def ohe_dim(self) -> int:
        return self._ohe_dim

    @property
    def encode_dim(self) -> int:
        return self._ohe_dim + len(self.manifest)

    def generic_index(self, column: str) -> int:
        return self._offsets[column] + len(self.vocabularies[column])

    def indices_for(self, alert: AlertRecord) -> tuple[int, ...]:
        hits: set[int] = set()
        for column in CATEGORICAL_COLUMNS:
            vocab = self.vocabularies[column]
            offset = self._offsets[column]
            for value in _column_values(alert, column):
                local = vocab.get(value)
                hits.add(offset + local if local is not None else self.generic_index(column))
        return tuple(sorted(hits))

    def save(self, path: str | Path) -> None:
        doc = {
            "format": self.format_version,
            "manifest_version": self.manifest.version,
            "min_cardinality": self.min_cardinality,
            "columns": {
                column: sorted(vocab, key=vocab.get)
                for column, vocab in self.vocabularies.items()
            },
        }
        Path(path).write_text(json.dumps(doc, indent=0, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EncoderModel":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != "enc-v1":
            raise ValueError(f"unsupported encoder format {doc.get('format')!r}")
        if doc["manifest_version"] != MANIFEST_VERSION:
            raise ValueError(f"manifest version mismatch: {doc['manifest_version']}")
        vocabularies = {
            column: {value: i for i, value in enumerate(values)}
            for column, values in doc["columns"].items()
        }
        return cls(vocabularies=vocabularies, min_cardinality=int(doc["min_cardinality"]))


def fit_encoder(alerts: Iterable[AlertRecord], min_cardinality: int = 10) -> EncoderModel:
    """Build vocabularies from a training stream.

    A value enters a column's vocabulary iff it appears on at least
    `min_cardinality` alerts. Vocabulary order is lexicographic, so a fixed
    stream always produces an identical encoder.
    """
    if min_cardinality < 1:
        raise ValueError("min_cardinality must be >= 1")
    counts: dict[str, Counter] = {column: Counter() for column in CATEGORICAL_COLUMNS}
    n_alerts = 0
    for alert in alerts:
        n_alerts += 1
        for column in CATEGORICAL_COLUMNS:
            for value in _column_values(alert, column):
                counts[column][value] += 1
    if n_alerts == 0:
        raise ValueError("cannot fit an encoder on an empty alert stream")
    vocabularies = {
        column: {value: i for i, value in enumerate(sorted(
            v for v, c in counter.items() if c >= min_cardinality))}
        for column, counter in counts.items()
    }
    return EncoderModel(vocabularies=vocabularies, min_cardinality=min_cardinality)


@dataclass(slots=True)
class EncodedAlert:
    alert_id: str
    incident_id: str
    org_id: str
    detector_id: str
    timestamp: datetime
    ohe_indices: tuple[int, ...]
    numeric: np.ndarray
    grade: Optional[Grade] = None
    action: Optional[Action] = None

    @property
    def incident_key(self) -> tuple[str, str]:
        return (self.org_id, self.incident_id)


def encode_alert(encoder: EncoderModel, alert: AlertRecord) -> EncodedAlert:
    """Encode one alert. Unseen categorical values land in generic buckets."""
    return EncodedAlert(
        alert_id=alert.alert_id,
        incident_id=alert.incident_id,
        org_id=alert.org_id,
        detector_id=alert.detector_id,
        timestamp=alert.timestamp,
        ohe_indices=encoder.indices_for(alert),
        numeric=extract_numeric_features(alert, encoder.manifest),
        grade=alert.grade,
        action=alert.action,
    )


def incident_hash(detector_ids: Iterable[str]) -> str:
    """SHA-1 digest of the sorted, deduplicated detector ids joined by '|'."""
    canonical = "|".join(sorted(set(detector_ids)))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()


_GRADE_PRIORITY = (Grade.TP, Grade.FP, Grade.BP)


def majority_grade(grades: Sequence[Grade]) -> Optional[Grade]:
    """Majority vote with count ties resolved in the order TP, FP, BP."""
    if not grades:
        return None
    counts = Counter(grades)
    top = max(counts.values())
    for grade in _GRADE_PRIORITY:
        if counts.get(grade) == top:
            return grade
    return None


@dataclass(slots=True)
class IncidentRecord:
    incident_id: str
    org_id: str
    alert_ids: tuple[str, ...]
    numeric: np.ndarray
    ohe_counts: dict[int, float]
    grade: Optional[Grade]
    incident_hash: str
    detector_set: tuple[str, ...]
    latest_timestamp: datetime

    @property
    def incident_key(self) -> tuple[str, str]:
        return (self.org_id, self.incident_id)

    @property
    def grade_tag(self) -> str:
        return self.grade.value if self.grade is not None else "ungraded"


def form_incidents(alerts: Iterable[EncodedAlert], require_grade: bool = False) -> list[IncidentRecord]:
    """Aggregate encoded alerts into one record per (org_id, incident_id).

    Numeric columns are summed and one-hot hits are counted. The incident
    grade is the majority over the graded members; when `require_grade` is
    set, ungraded incidents are dropped.
    """
    groups: dict[tuple[str, str], list[EncodedAlert]] = {}
    order: list[tuple[str, str]] = []
    for alert in alerts:
        key = alert.incident_key
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(alert)

    incidents: list[IncidentRecord] = []
    for key in order:
        members = groups[key]
        numeric = members[0].numeric.copy()
        for member in members[1:]:
            numeric += member.numeric
        ohe_counts: dict[int, float] = {}
        for member in members:
            for index in member.ohe_indices:
                ohe_counts[index] = ohe_counts.get(index, 0.0) + 1.0
        grade = majority_grade([m.grade for m in members if m.grade is not None])
        if require_grade and grade is None:
            continue
        detectors = tuple(sorted({m.detector_id for m in members}))
        incidents.append(IncidentRecord(
            incident_id=key[1],
            org_id=key[0],
            alert_ids=tuple(m.alert_id for m in members),
            numeric=numeric,
            ohe_counts=ohe_counts,
            grade=grade,
            incident_hash=incident_hash(detectors),
            detector_set=detectors,
            latest_timestamp=max(m.timestamp for m in members),
        ))
    return incidents


def sample_incidents(incidents: Sequence[IncidentRecord], cap: int, seed: int = 0) -> list[IncidentRecord]:
    """Cap each (incident_hash, grade) group at `cap` members, uniformly at random.

    Selection is seeded per group so the surviving set is stable across runs
    and independent of group iteration order. Input order is preserved.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    groups: dict[tuple[str, str], list[int]] = {}
    for position, incident in enumerate(incidents):
        groups.setdefault((incident.incident_hash, incident.grade_tag), []).append(position)

    keep: set[int] = set()
    for (digest, tag), positions in groups.items():
        if len(positions) <= cap:
            keep.update(positions)
            continue
        entropy = [seed, int.from_bytes(hashlib.sha1(f"{digest}:{tag}".encode()).digest()[:8], "little")]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        chosen = rng.choice(len(positions), size=cap, replace=False)
        keep.update(positions[i] for i in chosen)
    return [incident for position, incident in enumerate(incidents) if position in keep]


def alerts_to_matrix(encoder: EncoderModel, alerts: Sequence[EncodedAlert]) -> sp.csr_matrix:
    """Stack encoded alerts into a sparse (n, encode_dim) matrix.

    One-hot entries are 1.0; numeric features occupy the trailing columns.
    """
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    ohe_dim = encoder.ohe_dim
    for alert in alerts:
        indices.extend(alert.ohe_indices)
        data.extend([1.0] * len(alert.ohe_indices))
        nz = np.nonzero(alert.numeric)[0]
        indices.extend(ohe_dim + nz)
        data.extend(alert.numeric[nz])
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int32), np.asarray(indptr, dtype=np.int64)),
        shape=(len(alerts), encoder.encode_dim),
    )


def incidents_to_matrix(encoder: EncoderModel, incidents: Sequence[IncidentRecord]) -> sp.csr_matrix:
    """Stack incident records into a sparse (n, encode_dim) matrix of counts."""
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    ohe_dim = encoder.ohe_dim
    for incident in incidents:
        for index in sorted(incident.ohe_counts):
            indices.append(index)
            data.append(incident.ohe_counts[index])
        nz = np.nonzero(incident.numeric)[0]
        indices.extend(ohe_dim + nz)
        data.extend(incident.numeric[nz])
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int32), np.asarray(indptr, dtype=np.int64)),
        shape=(len(incidents), encoder.encode_dim),
    )
