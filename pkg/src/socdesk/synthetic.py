"""Synthetic GUIDE-schema telemetry with learnable triage and action structure.

Real graded incident telemetry is customer data; this generator produces a
desk-scale stand-in with the same shape: orgs of very different sizes,
detectors with strong but noisy grade tendencies, long-tailed incident sizes,
entity evidence whose kinds follow the detector's domain, and remediation
actions implied by the entities involved. Grades correlate with detector
identity, category, severity, and analysis verdicts, so models trained on
the output have real signal to find; label noise keeps them honest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .telemetry import (
    GUIDE_COLUMNS,
    Action,
    AlertRecord,
    EntityKind,
    EvidenceRecord,
    Grade,
)

_CATEGORIES = (
    "InitialAccess", "CredentialAccess", "Malware", "Exfiltration",
    "SuspiciousActivity", "Phishing", "LateralMovement", "ResourceAbuse",
    "PolicyViolation",
)

_PRODUCTS = ("endpoint", "identity", "email", "cloud_apps", "azure")

# Which entity kinds a detector in each domain tends to produce, and which
# remediation action fits when analysts act on its alerts.
_DOMAIN_PROFILES = {
    "identity": {
        "kinds": (EntityKind.USER, EntityKind.IP, EntityKind.CLOUD_LOGON_SESSION, EntityKind.MACHINE),
        "action": Action.CONTAIN_ACCOUNT,
        "categories": ("CredentialAccess", "InitialAccess", "SuspiciousActivity"),
        "products": ("identity", "cloud_apps"),
    },
    "endpoint": {
        "kinds": (EntityKind.MACHINE, EntityKind.FILE, EntityKind.PROCESS, EntityKind.MALWARE, EntityKind.USER),
        "action": Action.ISOLATE_DEVICE,
        "categories": ("Malware", "LateralMovement", "SuspiciousActivity"),
        "products": ("endpoint",),
    },
    "email": {
        "kinds": (EntityKind.MAIL_MESSAGE, EntityKind.MAILBOX, EntityKind.URL, EntityKind.USER, EntityKind.MAIL_CLUSTER),
        "action": Action.CONTAIN_ACCOUNT,
        "categories": ("Phishing", "InitialAccess"),
        "products": ("email",),
    },
    "cloud": {
        "kinds": (EntityKind.AZURE_RESOURCE, EntityKind.IP, EntityKind.CLOUD_APPLICATION, EntityKind.BLOB),
        "action": Action.STOP_VIRTUAL_MACHINE,
        "categories": ("ResourceAbuse", "Exfiltration", "PolicyViolation"),
        "products": ("azure", "cloud_apps"),
    },
}

_GRADE_BASE_RATES = {Grade.TP: 0.20, Grade.FP: 0.35, Grade.BP: 0.45}


@dataclass(frozen=True)
class DetectorProfile:
    detector_id: str
    domain: str
    category: str
    product_id: str
    severity: int
    techniques: tuple[str, ...]
    dominant_grade: Grade
    grade_confidence: float  # probability mass on the dominant grade
    actionable: bool


@dataclass
class SynthConfig:
    n_incidents: int = 1000
    n_orgs: int = 25
    n_detectors: int = 120
    seed: int = 7
    start: datetime = datetime(2024, 6, 1, tzinfo=timezone.utc)
    window_days: int = 14
    ungraded_fraction: float = 0.0
    action_label_rate: float = 0.35  # labeled fraction of actionable-detector alerts
    label_noise: float = 0.06
    action_noise: float = 0.02


def _build_detectors(rng: np.random.Generator, config: SynthConfig) -> list[DetectorProfile]:
    domains = list(_DOMAIN_PROFILES)
    technique_pool = [f"T{1000 + i}" for i in range(60)]
    grades = list(_GRADE_BASE_RATES)
    grade_p = np.asarray([_GRADE_BASE_RATES[g] for g in grades])
    detectors = []
    for i in range(config.n_detectors):
        domain = domains[int(rng.integers(len(domains)))]
        profile = _DOMAIN_PROFILES[domain]
        dominant = grades[int(rng.choice(len(grades), p=grade_p))]
        detectors.append(DetectorProfile(
            detector_id=f"det{i:04d}",
            domain=domain,
            category=profile["categories"][int(rng.integers(len(profile["categories"])))],
            product_id=profile["products"][int(rng.integers(len(profile["products"])))],
            severity=int(rng.choice([0, 1, 2, 3], p=[0.15, 0.35, 0.35, 0.15])),
            techniques=tuple(sorted(rng.choice(technique_pool, size=int(rng.integers(1, 4)), replace=False))),
            dominant_grade=dominant,
            grade_confidence=float(rng.uniform(0.85, 0.97)),
            actionable=bool(rng.random() < 0.45),
        ))
    return detectors


def _evidence_for(rng: np.random.Generator, detector: DetectorProfile, org_id: str, grade: Optional[Grade]) -> list[EvidenceRecord]:
    kinds = _DOMAIN_PROFILES[detector.domain]["kinds"]
    n_evidence = int(rng.integers(2, 7))
    out = []
    malicious_rate = {Grade.TP: 0.55, Grade.FP: 0.10, Grade.BP: 0.05, None: 0.10}[grade]
    suspicious_rate = {Grade.TP: 0.30, Grade.FP: 0.35, Grade.BP: 0.15, None: 0.20}[grade]
    for j in range(n_evidence):
        kind = kinds[int(rng.integers(len(kinds)))]
        role = "Impacted" if (j == 0 or rng.random() < 0.3) else "Related"
        draw = rng.random()
        verdict = "Malicious" if draw < malicious_rate else ("Suspicious" if draw < malicious_rate + suspicious_rate else "NoThreatsFound")
        evidence = EvidenceRecord(entity_type=kind, evidence_role=role, last_verdict=verdict)
        if kind in (EntityKind.USER, EntityKind.MAILBOX, EntityKind.CLOUD_LOGON_SESSION):
            evidence.account_object_id = f"{org_id}-user{int(rng.integers(200)):03d}"
        if kind in (EntityKind.MACHINE, EntityKind.PROCESS):
            evidence.device_id = f"{org_id}-host{int(rng.integers(150)):03d}"
        if kind is EntityKind.IP:
            evidence.ip_address = f"10.{int(rng.integers(255))}.{int(rng.integers(255))}.{int(rng.integers(255))}"
        if kind is EntityKind.URL:
            evidence.url = f"https://site{int(rng.integers(400)):03d}.example.test/p{int(rng.integers(50))}"
        if kind in (EntityKind.FILE, EntityKind.MALWARE):
            evidence.sha256 = f"{int(rng.integers(2**63)):064x}"
            evidence.file_name = f"payload{int(rng.integers(300)):03d}.exe"
        if kind is EntityKind.MAIL_MESSAGE:
            evidence.network_message_id = f"{org_id}-msg{int(rng.integers(5000)):05d}"
        if kind is EntityKind.MAIL_CLUSTER:
            evidence.email_cluster_id = f"{org_id}-cluster{int(rng.integers(80)):03d}"
        if kind in (EntityKind.AZURE_RESOURCE, EntityKind.BLOB):
            evidence.resource_id_name = f"{org_id}-vm{int(rng.integers(60)):03d}"
            evidence.resource_type = "VirtualMachine" if kind is EntityKind.AZURE_RESOURCE else "Blob"
        if kind is EntityKind.CLOUD_APPLICATION:
            evidence.application_id = f"app{int(rng.integers(40)):03d}"
            evidence.application_name = f"CloudApp{int(rng.integers(40)):03d}"
        if rng.random() < 0.4:
            evidence.country_code = ["US", "DE", "IN", "BR", "JP"][int(rng.integers(5))]
        out.append(evidence)
    return out


def generate_alerts(config: SynthConfig) -> list[AlertRecord]:
    """Generate alert records for `config.n_incidents` incidents, deterministically."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    detectors = _build_detectors(rng, config)
    grades = list(_GRADE_BASE_RATES)

    # Long-tailed org sizes.
    org_weights = rng.pareto(1.2, size=config.n_orgs) + 0.25
    org_p = org_weights / org_weights.sum()
    org_ids = [f"org{i:03d}" for i in range(config.n_orgs)]

    window_seconds = config.window_days * 86400
    alerts: list[AlertRecord] = []
    alert_serial = 0

    size_choices = np.asarray([1, 2, 3, 4, 5, 8, 12])
    size_p = np.asarray([0.62, 0.20, 0.08, 0.04, 0.03, 0.02, 0.01])

    for i in range(config.n_incidents):
        org_id = org_ids[int(rng.choice(config.n_orgs, p=org_p))]
        incident_id = f"inc{config.seed:03d}-{i:06d}"
        base = detectors[int(rng.integers(len(detectors)))]
        n_alerts = int(rng.choice(size_choices, p=size_p))
        same_domain = [d for d in detectors if d.domain == base.domain]

        # Incident grade: the base detector's tendency, with label noise.
        if rng.random() < config.ungraded_fraction:
            grade = None
        else:
            if rng.random() < base.grade_confidence:
                grade = base.dominant_grade
            else:
                grade = grades[int(rng.integers(len(grades)))]
            if rng.random() < config.label_noise:
                grade = grades[int(rng.integers(len(grades)))]

        offset = float(rng.uniform(0, window_seconds))
        for j in range(n_alerts):
            detector = base if (j == 0 or rng.random() < 0.6) else same_domain[int(rng.integers(len(same_domain)))]
            ts = config.start + timedelta(seconds=offset + float(rng.uniform(0, 3600)))
            severity = min(3, max(0, detector.severity + int(rng.integers(-1, 2))))
            if grade is Grade.TP and rng.random() < 0.5:
                severity = min(3, severity + 1)

            action = None
            if detector.actionable and rng.random() < config.action_label_rate:
                action = _DOMAIN_PROFILES[detector.domain]["action"]
                if rng.random() < config.action_noise:
                    others = [a for a in Action if a is not action]
                    action = others[int(rng.integers(len(others)))]

            alerts.append(AlertRecord(
                alert_id=f"al{config.seed:03d}-{alert_serial:08d}",
                incident_id=incident_id,
                org_id=org_id,
                detector_id=detector.detector_id,
                product_id=detector.product_id,
                category=detector.category,
                severity=severity,
                timestamp=ts,
                mitre_techniques=frozenset(detector.techniques),
                evidence=_evidence_for(rng, detector, org_id, grade),
                grade=grade,
                action=action,
            ))
            alert_serial += 1
    return alerts


_WIRE_GRADES = {Grade.TP: "TruePositive", Grade.FP: "FalsePositive", Grade.BP: "BenignPositive"}


def write_guide_csv(alerts: Iterable[AlertRecord], path: str | Path, include_optional: bool = True) -> int:
    """Write alerts as a GUIDE-schema CSV, one row per evidence item.

    With `include_optional`, the richer ProductId and Severity columns ride
    along after the 45 mandatory ones. Returns the number of rows written.
    """
    columns = list(GUIDE_COLUMNS) + (list(("ProductId", "Severity")) if include_optional else [])
    severity_names = {0: "Informational", 1: "Low", 2: "Medium", 3: "High"}
    rows = 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for alert in alerts:
            base = {
                "Id": f"{alert.org_id}-{alert.incident_id}",
                "OrgId": alert.org_id,
                "IncidentId": alert.incident_id,
                "AlertId": alert.alert_id,
                "Timestamp": alert.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"),
                "DetectorId": alert.detector_id,
                "AlertTitle": f"{alert.category} activity",
                "Category": alert.category,
                "MitreTechniques": ";".join(sorted(alert.mitre_techniques)),
                "IncidentGrade": _WIRE_GRADES.get(alert.grade, ""),
                "ActionGrouped": alert.action.value if alert.action else "",
                "ActionGranular": "",
            }
            if include_optional:
                base["ProductId"] = alert.product_id
                base["Severity"] = severity_names.get(alert.severity, "Informational")
            evidence_list = alert.evidence or [EvidenceRecord(entity_type=EntityKind.GENERIC_ENTITY)]
            for evidence in evidence_list:
                row = dict(base)
                row["EntityType"] = evidence.entity_type_raw or evidence.entity_type.value
                row["EvidenceRole"] = evidence.evidence_role
                row["Roles"] = evidence.roles
                for column, attr in (
                    ("DeviceId", "device_id"), ("DeviceName", "device_name"), ("Sha256", "sha256"),
                    ("IpAddress", "ip_address"), ("Url", "url"), ("AccountSid", "account_sid"),
                    ("AccountUpn", "account_upn"), ("AccountObjectId", "account_object_id"),
                    ("AccountName", "account_name"), ("NetworkMessageId", "network_message_id"),
                    ("EmailClusterId", "email_cluster_id"), ("RegistryKey", "registry_key"),
                    ("RegistryValueName", "registry_value_name"), ("RegistryValueData", "registry_value_data"),
                    ("ApplicationId", "application_id"), ("ApplicationName", "application_name"),
                    ("OAuthApplicationId", "oauth_application_id"), ("ThreatFamily", "threat_family"),
                    ("FileName", "file_name"), ("FolderPath", "folder_path"),
                    ("ResourceIdName", "resource_id_name"), ("ResourceType", "resource_type"),
                    ("OSFamily", "os_family"), ("OSVersion", "os_version"),
                    ("AntispamDirection", "antispam_direction"), ("SuspicionLevel", "suspicion_level"),
                    ("LastVerdict", "last_verdict"), ("CountryCode", "country_code"),
                    ("State", "state"), ("City", "city"),
                ):
                    row[column] = getattr(evidence, attr) or ""
                writer.writerow(row)
                rows += 1
    return rows
