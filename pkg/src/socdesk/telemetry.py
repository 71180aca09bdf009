"""Domain types and GUIDE-schema telemetry ingestion.

The wire format is a 45-column CSV where each row is one piece of evidence.
Evidence rows sharing an AlertId fold into one alert; alerts sharing an
(OrgId, IncidentId) pair form an incident. Ingestion never drops a usable
row silently: malformed rows, unknown entity kinds, and unparseable
timestamps are counted on the stats object handed back to the caller.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class Grade(str, Enum):
    TP = "TP"
    FP = "FP"
    BP = "BP"


class Action(str, Enum):
    CONTAIN_ACCOUNT = "ContainAccount"
    ISOLATE_DEVICE = "IsolateDevice"
    STOP_VIRTUAL_MACHINE = "StopVirtualMachine"


_GRADE_ALIASES = {
    "tp": Grade.TP,
    "truepositive": Grade.TP,
    "fp": Grade.FP,
    "falsepositive": Grade.FP,
    "bp": Grade.BP,
    "benignpositive": Grade.BP,
    "informational": Grade.BP,
}

# "contain user" and "contain account" name the same action; both are accepted.
_ACTION_ALIASES = {
    "containaccount": Action.CONTAIN_ACCOUNT,
    "containuser": Action.CONTAIN_ACCOUNT,
    "ca": Action.CONTAIN_ACCOUNT,
    "isolatedevice": Action.ISOLATE_DEVICE,
    "isolatemachine": Action.ISOLATE_DEVICE,
    "id": Action.ISOLATE_DEVICE,
    "stopvirtualmachine": Action.STOP_VIRTUAL_MACHINE,
    "stopvm": Action.STOP_VIRTUAL_MACHINE,
    "vm": Action.STOP_VIRTUAL_MACHINE,
}


def parse_grade(raw: str | None) -> Optional[Grade]:
    if not raw:
        return None
    return _GRADE_ALIASES.get("".join(raw.split()).lower())


def parse_action(raw: str | None) -> Optional[Action]:
    if not raw:
        return None
    return _ACTION_ALIASES.get("".join(raw.split()).lower())


class EntityKind(str, Enum):
    """The 33 documented evidence entity kinds plus an UNKNOWN sentinel.

    Unknown wire values are preserved under the sentinel and counted,
    never dropped.
    """

    USER = "User"
    MACHINE = "Machine"
    IP = "Ip"
    URL = "Url"
    FILE = "File"
    PROCESS = "Process"
    MAIL_MESSAGE = "MailMessage"
    MAILBOX = "Mailbox"
    MAIL_CLUSTER = "MailCluster"
    CLOUD_APPLICATION = "CloudApplication"
    OAUTH_APPLICATION = "OAuthApplication"
    AZURE_RESOURCE = "AzureResource"
    REGISTRY_KEY = "RegistryKey"
    REGISTRY_VALUE = "RegistryValue"
    SECURITY_GROUP = "SecurityGroup"
    CLOUD_LOGON_REQUEST = "CloudLogonRequest"
    CLOUD_LOGON_SESSION = "CloudLogonSession"
    GENERIC_ENTITY = "GenericEntity"
    NIC = "Nic"
    MALWARE = "Malware"
    CONTAINER = "Container"
    CONTAINER_IMAGE = "ContainerImage"
    CONTAINER_REGISTRY = "ContainerRegistry"
    KUBERNETES_CLUSTER = "KubernetesCluster"
    KUBERNETES_NAMESPACE = "KubernetesNamespace"
    KUBERNETES_POD = "KubernetesPod"
    ACTIVE_DIRECTORY_DOMAIN = "ActiveDirectoryDomain"
    BLOB = "Blob"
    BLOB_CONTAINER = "BlobContainer"
    AMAZON_RESOURCE = "AmazonResource"
    GOOGLE_CLOUD_RESOURCE = "GoogleCloudResource"
    IOT_DEVICE = "IoTDevice"
    NETWORK_CONNECTION = "NetworkConnection"
    UNKNOWN = "Unknown"


ENTITY_KINDS: tuple[EntityKind, ...] = tuple(k for k in EntityKind if k is not EntityKind.UNKNOWN)

_ENTITY_BY_WIRE = {k.value.lower(): k for k in EntityKind}


def parse_entity_kind(raw: str | None) -> EntityKind:
    if not raw:
        return EntityKind.UNKNOWN
    return _ENTITY_BY_WIRE.get(raw.strip().lower(), EntityKind.UNKNOWN)


SEVERITY_LEVELS = {"informational": 0, "low": 1, "medium": 2, "high": 3}


def parse_severity(raw: str | None) -> tuple[int, bool]:
    """Map a severity string to its ordinal. Returns (ordinal, known)."""
    if raw is None or raw == "":
        return 0, True
    text = raw.strip().lower()
    if text in SEVERITY_LEVELS:
        return SEVERITY_LEVELS[text], True
    if text.isdigit() and int(text) in (0, 1, 2, 3):
        return int(text), True
    return 0, False


@dataclass(slots=True)
class EvidenceRecord:
    """One evidence row: an entity plus its per-kind attributes."""

    entity_type: EntityKind
    evidence_role: str = ""
    roles: str = ""
    entity_type_raw: Optional[str] = None  # original wire value when unknown
    device_id: Optional[str] = None
    device_name: Optional[str] = None
    sha256: Optional[str] = None
    ip_address: Optional[str] = None
    url: Optional[str] = None
    account_sid: Optional[str] = None
    account_upn: Optional[str] = None
    account_object_id: Optional[str] = None
    account_name: Optional[str] = None
    network_message_id: Optional[str] = None
    email_cluster_id: Optional[str] = None
    registry_key: Optional[str] = None
    registry_value_name: Optional[str] = None
    registry_value_data: Optional[str] = None
    application_id: Optional[str] = None
    application_name: Optional[str] = None
    oauth_application_id: Optional[str] = None
    threat_family: Optional[str] = None
    file_name: Optional[str] = None
    folder_path: Optional[str] = None
    resource_id_name: Optional[str] = None
    resource_type: Optional[str] = None
    os_family: Optional[str] = None
    os_version: Optional[str] = None
    antispam_direction: Optional[str] = None
    suspicion_level: Optional[str] = None
    last_verdict: Optional[str] = None
    country_code: Optional[str] = None
    state: Optional[str] = None
    city: Optional[str] = None

    def account_identity(self) -> Optional[str]:
        # Precedence: object id, then UPN, then SID, then plain name.
        return self.account_object_id or self.account_upn or self.account_sid or self.account_name

    def device_identity(self) -> Optional[str]:
        return self.device_id or self.device_name

    def application_identity(self) -> Optional[str]:
        return self.application_id or self.application_name or self.oauth_application_id


@dataclass(slots=True)
class AlertRecord:
    """One alert: grouping of evidence rows sharing an AlertId."""

    alert_id: str
    incident_id: str
    org_id: str
    detector_id: str
    product_id: str = "unknown"
    category: str = ""
    severity: int = 0
    timestamp: datetime = EPOCH
    mitre_techniques: frozenset[str] = frozenset()
    evidence: list[EvidenceRecord] = field(default_factory=list)
    grade: Optional[Grade] = None
    action: Optional[Action] = None

    @property
    def incident_key(self) -> tuple[str, str]:
        return (self.org_id, self.incident_id)


# The 45 mandatory wire columns, as published.
GUIDE_COLUMNS: tuple[str, ...] = (
    "Id", "OrgId", "IncidentId", "AlertId", "Timestamp", "DetectorId",
    "AlertTitle", "Category", "MitreTechniques", "IncidentGrade",
    "ActionGrouped", "ActionGranular", "EntityType", "EvidenceRole", "Roles",
    "DeviceId", "DeviceName", "Sha256", "IpAddress", "Url", "AccountSid",
    "AccountUpn", "AccountObjectId", "AccountName", "NetworkMessageId",
    "EmailClusterId", "RegistryKey", "RegistryValueName", "RegistryValueData",
    "ApplicationId", "ApplicationName", "OAuthApplicationId", "ThreatFamily",
    "FileName", "FolderPath", "ResourceIdName", "ResourceType", "OSFamily",
    "OSVersion", "AntispamDirection", "SuspicionLevel", "LastVerdict",
    "CountryCode", "State", "City",
)

# Columns the published telemetry omits but richer exports may carry.
OPTIONAL_COLUMNS: tuple[str, ...] = ("ProductId", "Severity")

_EVIDENCE_FIELD_BY_COLUMN = {
    "DeviceId": "device_id",
    "DeviceName": "device_name",
    "Sha256": "sha256",
    "IpAddress": "ip_address",
    "Url": "url",
    "AccountSid": "account_sid",
    "AccountUpn": "account_upn",
    "AccountObjectId": "account_object_id",
    "AccountName": "account_name",
    "NetworkMessageId": "network_message_id",
    "EmailClusterId": "email_cluster_id",
    "RegistryKey": "registry_key",
    "RegistryValueName": "registry_value_name",
    "RegistryValueData": "registry_value_data",
    "ApplicationId": "application_id",
    "ApplicationName": "application_name",
    "OAuthApplicationId": "oauth_application_id",
    "ThreatFamily": "threat_family",
    "FileName": "file_name",
    "FolderPath": "folder_path",
    "ResourceIdName": "resource_id_name",
    "ResourceType": "resource_type",
    "OSFamily": "os_family",
    "OSVersion": "os_version",
    "AntispamDirection": "antispam_direction",
    "SuspicionLevel": "suspicion_level",
    "LastVerdict": "last_verdict",
    "CountryCode": "country_code",
    "State": "state",
    "City": "city",
}


class SchemaError(ValueError):
    """Raised when a telemetry file does not carry the mandatory columns."""


@dataclass
class IngestStats:
    rows_read: int = 0
    evidence_rows: int = 0
    malformed_rows: int = 0
    timestamp_errors: int = 0
    severity_warnings: int = 0
    unknown_entity_types: int = 0
    unknown_grades: int = 0
    unknown_actions: int = 0
    alerts_emitted: int = 0
    extra_columns: tuple[str, ...] = ()


def parse_timestamp(raw: str | None) -> Optional[datetime]:
    """Parse an RFC 3339 timestamp; return None on failure."""
    if not raw:
        return None
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        try:
            ts = datetime.strptime(raw.strip(), "%Y-%m-%d %H:%M:%S")
        except ValueError:
            return None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _split_techniques(raw: str | None) -> frozenset[str]:
    if not raw:
        return frozenset()
    parts = [p.strip() for p in raw.replace(",", ";").split(";")]
    return frozenset(p for p in parts if p)


def ingest_guide_csv(
    path: str | Path,
    limit: Optional[int] = None,
    stats: Optional[IngestStats] = None,
) -> Iterator[AlertRecord]:
    """Read a GUIDE-schema CSV and yield one AlertRecord per AlertId.

    Evidence rows are folded into their alert in file order; alerts come out
    in first-seen order, so re-ingesting the same file yields an identical
    sequence. `limit` caps the number of data rows read. Malformed rows
    (missing identifier fields, or identifier conflicts for an AlertId) are
    counted on `stats` and skipped.
    """
    path = Path(path)
    if stats is None:
        stats = IngestStats()

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in GUIDE_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")
        known = set(GUIDE_COLUMNS) | set(OPTIONAL_COLUMNS)
        stats.extra_columns = tuple(c for c in header if c not in known)

        alerts: dict[str, AlertRecord] = {}
        order: list[str] = []

        for row in reader:
            if limit is not None and stats.rows_read >= limit:
                break
            stats.rows_read += 1

            alert_id = (row.get("AlertId") or "").strip()
            incident_id = (row.get("IncidentId") or "").strip()
            org_id = (row.get("OrgId") or "").strip()
            if not alert_id or not incident_id or not org_id:
                stats.malformed_rows += 1
                continue

            record = alerts.get(alert_id)
            if record is None:
                ts = parse_timestamp(row.get("Timestamp"))
                if ts is None:
                    stats.timestamp_errors += 1
                    ts = EPOCH
                severity, known_sev = parse_severity(row.get("Severity"))
                if not known_sev:
                    stats.severity_warnings += 1
                    log.warning("unrecognized severity %r, using 0", row.get("Severity"))
                grade = parse_grade(row.get("IncidentGrade"))
                if grade is None and (row.get("IncidentGrade") or "").strip():
                    stats.unknown_grades += 1
                action = parse_action(row.get("ActionGrouped")) or parse_action(row.get("ActionGranular"))
                if action is None and (row.get("ActionGrouped") or "").strip():
                    stats.unknown_actions += 1
                record = AlertRecord(
                    alert_id=alert_id,
                    incident_id=incident_id,
                    org_id=org_id,
                    detector_id=(row.get("DetectorId") or "").strip(),
                    product_id=(row.get("ProductId") or "").strip() or "unknown",
                    category=(row.get("Category") or "").strip(),
                    severity=severity,
                    timestamp=ts,
                    mitre_techniques=_split_techniques(row.get("MitreTechniques")),
                    grade=grade,
                    action=action,
                )
                alerts[alert_id] = record
                order.append(alert_id)
            elif record.incident_id != incident_id or record.org_id != org_id:
                # AlertId must be unique within a run; a conflicting parent is
                # a malformed row, not a second alert.
                stats.malformed_rows += 1
                continue
            else:
                record.mitre_techniques = record.mitre_techniques | _split_techniques(row.get("MitreTechniques"))
                ts = parse_timestamp(row.get("Timestamp"))
                if ts is not None and (record.timestamp == EPOCH or ts < record.timestamp):
                    record.timestamp = ts
                if record.grade is None:
                    record.grade = parse_grade(row.get("IncidentGrade"))
                if record.action is None:
                    record.action = parse_action(row.get("ActionGrouped")) or parse_action(row.get("ActionGranular"))

            kind = parse_entity_kind(row.get("EntityType"))
            raw_kind = (row.get("EntityType") or "").strip()
            if kind is EntityKind.UNKNOWN and raw_kind:
                stats.unknown_entity_types += 1
            evidence = EvidenceRecord(
                entity_type=kind,
                evidence_role=(row.get("EvidenceRole") or "").strip(),
                roles=(row.get("Roles") or "").strip(),
                entity_type_raw=raw_kind if kind is EntityKind.UNKNOWN and raw_kind else None,
            )
            for column, attr in _EVIDENCE_FIELD_BY_COLUMN.items():
                value = (row.get(column) or "").strip()
                if value:
                    setattr(evidence, attr, value)
            record.evidence.append(evidence)
            stats.evidence_rows += 1

    for alert_id in order:
        stats.alerts_emitted += 1
        yield alerts[alert_id]


_EVIDENCE_JSON_FIELDS = tuple(f for f in EvidenceRecord.__dataclass_fields__ if f != "entity_type")


def evidence_to_json(evidence: EvidenceRecord) -> dict:
    doc = {"entity_type": evidence.entity_type.value}
    for name in _EVIDENCE_JSON_FIELDS:
        value = getattr(evidence, name)
        if value:
            doc[name] = value
    return doc


def evidence_from_json(doc: dict) -> EvidenceRecord:
    kwargs = {name: doc[name] for name in _EVIDENCE_JSON_FIELDS if name in doc}
    return EvidenceRecord(entity_type=EntityKind(doc["entity_type"]), **kwargs)


def alert_to_json(alert: AlertRecord) -> dict:
    return {
        "alert_id": alert.alert_id,
        "incident_id": alert.incident_id,
        "org_id": alert.org_id,
        "detector_id": alert.detector_id,
        "product_id": alert.product_id,
        "category": alert.category,
        "severity": alert.severity,
        "timestamp": alert.timestamp.isoformat(),
        "mitre_techniques": sorted(alert.mitre_techniques),
        "evidence": [evidence_to_json(e) for e in alert.evidence],
        "grade": alert.grade.value if alert.grade else None,
        "action": alert.action.value if alert.action else None,
    }


def alert_from_json(doc: dict) -> AlertRecord:
    return AlertRecord(
        alert_id=doc["alert_id"],
        incident_id=doc["incident_id"],
        org_id=doc["org_id"],
        detector_id=doc["detector_id"],
        product_id=doc.get("product_id", "unknown"),
        category=doc.get("category", ""),
        severity=int(doc.get("severity", 0)),
        timestamp=datetime.fromisoformat(doc["timestamp"]),
        mitre_techniques=frozenset(doc.get("mitre_techniques", ())),
        evidence=[evidence_from_json(e) for e in doc.get("evidence", ())],
        grade=Grade(doc["grade"]) if doc.get("grade") else None,
        action=Action(doc["action"]) if doc.get("action") else None,
    )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint, exhaustive train/val/test partition of incident keys."""

    train_ids: frozenset[tuple[str, str]]
    val_ids: frozenset[tuple[str, str]]
    test_ids: frozenset[tuple[str, str]]
    strata: str
    seed: int
    fractions: tuple[float, ...]

    def part_of(self, key: tuple[str, str]) -> Optional[str]:
        if key in self.train_ids:
            return "train"
        if key in self.val_ids:
            return "val"
        if key in self.test_ids:
            return "test"
        return None

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train_ids), len(self.val_ids), len(self.test_ids))


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(x) for x in raw]
    short = n - sum(counts)
    remainders = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def stratified_split(
    records: Iterable,
    fractions: Sequence[float] = (0.70, 0.10, 0.20),
    strata: Callable[[object], str] = lambda r: str(r.grade),
    seed: int = 0,
    group_key: Callable[[object], tuple[str, str]] = lambda r: (r.org_id, r.incident_id),
) -> DatasetSplit:
    """Stratified split with incident co-location.

    Records are grouped into incidents; every record of one incident lands in
    the same part. Each incident's stratum is the majority label over its
    records (ties to the lexicographically smallest). Within a stratum, part
    sizes follow `fractions` by largest remainder, so they are exact within
    one incident and invariant under the seed. Two-way fractions are treated
    as (train, test) with an empty validation part.
    """
    fracs = tuple(float(f) for f in fractions)
    if len(fracs) == 2:
        fracs = (fracs[0], 0.0, fracs[1])
    if len(fracs) != 3:
        raise ValueError(f"expected 2 or 3 fractions, got {len(fracs)}")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fracs)}")

    labels_by_unit: dict[tuple[str, str], Counter] = {}
    for record in records:
        key = group_key(record)
        label = strata(record)
        if label is None:
            raise ValueError(f"record {key} lacks a stratification label")
        labels_by_unit.setdefault(key, Counter())[str(label)] += 1

    units_by_stratum: dict[str, list[tuple[str, str]]] = {}
    for key in sorted(labels_by_unit):
        counts = labels_by_unit[key]
        top = max(counts.values())
        label = min(v for v, c in counts.items() if c == top)
        units_by_stratum.setdefault(label, []).append(key)

    parts: tuple[set, set, set] = (set(), set(), set())
    n_parts = sum(1 for f in fracs if f > 0)
    for label in sorted(units_by_stratum):
        units = units_by_stratum[label]
        if len(units) < n_parts:
            log.warning("stratum %r has %d incident(s) for %d parts; best-effort assignment",
                        label, len(units), n_parts)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _stable_u32(label)])))
        order = rng.permutation(len(units))
        counts = _largest_remainder(len(units), fracs)
        cursor = 0
        for part_index, count in enumerate(counts):
            for j in order[cursor:cursor + count]:
                parts[part_index].add(units[j])
            cursor += count

    return DatasetSplit(
        train_ids=frozenset(parts[0]),
        val_ids=frozenset(parts[1]),
        test_ids=frozenset(parts[2]),
        strata="majority-record-label",
        seed=seed,
        fractions=fracs,
    )


def _stable_u32(text: str) -> int:
    return int.from_bytes(hashlib.sha1(text.encode("utf-8")).digest()[:4], "little")


SPLIT_MANIFEST_VERSION = "socdesk-split v1"


def save_split(split: DatasetSplit, path: str | Path) -> None:
    """Write a split manifest: version, seed, strata, then one line per incident."""
    path = Path(path)
    lines = [
        SPLIT_MANIFEST_VERSION,
        f"seed\t{split.seed}",
        f"strata\t{split.strata}",
        "fractions\t" + "\t".join(repr(f) for f in split.fractions),
    ]
    for part, ids in (("train", split.train_ids), ("val", split.val_ids), ("test", split.test_ids)):
        for org_id, incident_id in sorted(ids):
            lines.append(f"{part}\t{org_id}\t{incident_id}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> DatasetSplit:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPLIT_MANIFEST_VERSION:
        raise ValueError(f"not a split manifest: {path}")
    seed = 0
    strata = ""
    fractions: tuple[float, ...] = (0.70, 0.10, 0.20)
    parts: dict[str, set] = {"train": set(), "val": set(), "test": set()}
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = line.split("\t")
        if fields[0] == "seed":
            seed = int(fields[1])
        elif fields[0] == "strata":
            strata = fields[1]
        elif fields[0] == "fractions":
            fractions = tuple(float(f) for f in fields[1:])
        elif fields[0] in parts and len(fields) == 3:
            parts[fields[0]].add((fields[1], fields[2]))
        else:
            raise ValueError(f"bad manifest line: {line!r}")
    return DatasetSplit(
        train_ids=frozenset(parts["train"]),
        val_ids=frozenset(parts["val"]),
        test_ids=frozenset(parts["test"]),
        strata=strata,
        seed=seed,
        fractions=fractions,
    )
