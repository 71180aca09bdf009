"""Walkthrough: the HTTP API and the analyst feedback loop.

Drives the service in-process: browse the incident queue, submit a verdict
with a corrected grade, and watch the label flow into the next train cycle.
"""

import tempfile
from datetime import datetime, timedelta, timezone

from fastapi.testclient import TestClient

from socdesk import Engine, ListSource, PipelineConfig
from socdesk.service import create_app
from socdesk.synthetic import SynthConfig, generate_alerts

START = datetime(2024, 6, 1, tzinfo=timezone.utc)

engine = Engine(tempfile.mkdtemp(prefix="socdesk-svc-"), PipelineConfig(
    grid={"n_estimators": [10], "max_depth": [12], "min_samples_split": [5], "class_weight": [None]},
    seed=31,
))
train = generate_alerts(SynthConfig(n_incidents=800, n_orgs=8, n_detectors=40, seed=4))
window = generate_alerts(SynthConfig(
    n_incidents=15, n_orgs=8, n_detectors=40, seed=5,
    start=START + timedelta(days=30), window_days=1, ungraded_fraction=1.0))
source = ListSource(train + window)

engine.run_train_cycle(source)
engine.run_inference_batch(
    source, window_end=START + timedelta(days=32), window_start=START + timedelta(days=30))

client = TestClient(create_app(engine, source=source))

print("== 1. the incident queue ==")
queue = client.get("/incidents", params={"page_size": 5}).json()
print(f"{queue['total']} incidents; first page:")
for row in queue["incidents"]:
    triage = row["triage"]
    shown = f"{triage['grade']} @ {triage['score']:.2f}" if triage and triage["emitted"] else "no recommendation"
    print(f"  {row['incident']:24s} alerts={row['alert_count']} triage={shown}")

print("\n== 2. incident detail ==")
incident = queue["incidents"][0]["incident"]
detail = client.get(f"/incidents/{incident}").json()
print(f"{incident}: {len(detail['alerts'])} alerts, "
      f"{len(detail['similar'])} similar, "
      f"remediation={'yes' if detail['remediation'] and detail['remediation']['emitted'] else 'no'}")

print("\n== 3. analyst feedback: dismiss with corrected grade FP ==")
client.post("/feedback", json={
    "incident": incident, "kind": "triage", "revision": 1,
    "verdict": "dismissed", "grade": "FP",
}, headers={"X-Actor-Id": "analyst-demo"})
metrics = client.get("/metrics").json()["feedback"]
print(f"feedback counters: {metrics}")

print("\n== 4. the next train cycle consumes the label ==")
response = client.post("/admin/run/train").json()["report"]
print(f"labels from feedback: {response['labels_from_feedback']}, "
      f"alerts relabeled in this cycle: {response['labels_applied']}")
print(f"incident {incident} now carries grade "
      f"{engine.labels.grade_for(incident)} for future training")
