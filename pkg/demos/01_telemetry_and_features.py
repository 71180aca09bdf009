"""Walkthrough: telemetry ingestion and feature engineering.

Generates a small synthetic GUIDE-schema CSV, ingests it back, and shows how
evidence rows become alerts, alerts become numeric + one-hot features, and
encoded alerts aggregate into incidents.
"""

import tempfile
from pathlib import Path

from socdesk import (
    IngestStats,
    MANIFEST_V1,
    encode_alert,
    fit_encoder,
    form_incidents,
    ingest_guide_csv,
    stratified_split,
)
from socdesk.synthetic import SynthConfig, generate_alerts, write_guide_csv

workdir = Path(tempfile.mkdtemp(prefix="socdesk-demo-"))
csv_path = workdir / "telemetry.csv"

print("== 1. generate a synthetic telemetry file ==")
alerts = generate_alerts(SynthConfig(n_incidents=500, n_orgs=8, n_detectors=40, seed=7))
rows = write_guide_csv(alerts, csv_path)
print(f"wrote {rows} evidence rows for {len(alerts)} alerts -> {csv_path}")

print("\n== 2. ingest it back ==")
stats = IngestStats()
records = list(ingest_guide_csv(csv_path, stats=stats))
print(f"alerts: {len(records)}, evidence rows: {stats.evidence_rows}, "
      f"malformed: {stats.malformed_rows}")
sample = records[0]
print(f"first alert: {sample.alert_id} detector={sample.detector_id} "
      f"grade={sample.grade} evidence={len(sample.evidence)}")

print("\n== 3. numeric features and one-hot encoding ==")
print(f"numeric manifest {MANIFEST_V1.version}: {len(MANIFEST_V1)} features")
print("first ten:", ", ".join(MANIFEST_V1.names[:10]))
encoder = fit_encoder(records, min_cardinality=10)
print(f"encode dimension: {encoder.encode_dim} "
      f"(one-hot {encoder.ohe_dim} + numeric {len(MANIFEST_V1)})")
for column, vocab in encoder.vocabularies.items():
    print(f"  column {column}: {len(vocab)} in-vocabulary values + 1 generic bucket")

encoded = [encode_alert(encoder, a) for a in records]
print(f"encoded first alert: {len(encoded[0].ohe_indices)} one-hot hits, "
      f"evidence_count={encoded[0].numeric[0]:.0f}")

print("\n== 4. incidents: grouped, summed, majority-graded ==")
incidents = form_incidents(encoded, require_grade=True)
print(f"{len(incidents)} graded incidents from {len(encoded)} alerts")
big = max(incidents, key=lambda i: len(i.alert_ids))
print(f"largest incident {big.incident_id}: {len(big.alert_ids)} alerts, "
      f"grade={big.grade.value}, hash={big.incident_hash[:12]}..., "
      f"detectors={list(big.detector_set)}")

print("\n== 5. stratified split with incident co-location ==")
split = stratified_split(incidents, strata=lambda r: r.grade_tag, seed=7)
print(f"train/val/test sizes: {split.sizes} (70/10/20 of {len(incidents)})")
