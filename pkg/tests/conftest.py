import csv
from datetime import datetime, timedelta, timezone

import pytest

from socdesk.telemetry import (
    GUIDE_COLUMNS,
    Action,
    AlertRecord,
    EntityKind,
    EvidenceRecord,
    Grade,
)

BASE_TS = datetime(2024, 6, 5, 12, 30, tzinfo=timezone.utc)


def make_evidence(kind=EntityKind.IP, role="Related", **attrs) -> EvidenceRecord:
    return EvidenceRecord(entity_type=kind, evidence_role=role, **attrs)


def make_alert(
    alert_id="a1",
    incident_id="i1",
    org_id="org1",
    detector_id="det1",
    category="Malware",
    severity=2,
    ts_offset_minutes=0,
    techniques=(),
    evidence=None,
    grade=None,
    action=None,
    product_id="endpoint",
) -> AlertRecord:
    return AlertRecord(
        alert_id=alert_id,
        incident_id=incident_id,
        org_id=org_id,
        detector_id=detector_id,
        product_id=product_id,
        category=category,
        severity=severity,
        timestamp=BASE_TS + timedelta(minutes=ts_offset_minutes),
        mitre_techniques=frozenset(techniques),
        evidence=list(evidence or []),
        grade=grade,
        action=action,
    )


def write_rows(path, rows, columns=GUIDE_COLUMNS):
    """Write raw evidence rows (dicts keyed by column name) to a CSV file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    return path


def guide_row(alert_id="a1", incident_id="i1", org_id="org1", detector_id="det1", **overrides):
    row = {
        "Id": f"{org_id}-{incident_id}",
        "OrgId": org_id,
        "IncidentId": incident_id,
        "AlertId": alert_id,
        "Timestamp": "2024-06-05T12:30:00Z",
        "DetectorId": detector_id,
        "AlertTitle": "t",
        "Category": "Malware",
        "MitreTechniques": "",
        "IncidentGrade": "",
        "ActionGrouped": "",
        "ActionGranular": "",
        "EntityType": "Ip",
        "EvidenceRole": "Related",
        "Roles": "",
        "IpAddress": "10.0.0.1",
    }
    row.update(overrides)
    return row


@pytest.fixture
def tmp_csv(tmp_path):
    return tmp_path / "telemetry.csv"
