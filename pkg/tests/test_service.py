import json
from datetime import datetime, timedelta, timezone

import pytest
from fastapi.testclient import TestClient

from socdesk.pipeline import Engine, ListSource, PipelineConfig
from socdesk.service import FeedbackStore, apply_feedback_as_labels, create_app
from socdesk.synthetic import SynthConfig, generate_alerts
from socdesk.telemetry import Grade

START = datetime(2024, 6, 1, tzinfo=timezone.utc)
GRID = {"n_estimators": [6], "max_depth": [10], "min_samples_split": [5], "class_weight": [None]}


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    engine = Engine(root, PipelineConfig(grid=dict(GRID), seed=13))
    train = generate_alerts(SynthConfig(n_incidents=500, n_orgs=6, n_detectors=30, seed=2))
    window = generate_alerts(SynthConfig(
        n_incidents=20, n_orgs=6, n_detectors=30, seed=51,
        start=START + timedelta(days=30), window_days=1, ungraded_fraction=1.0))
    source = ListSource(train + window)
    engine.run_train_cycle(source)
    engine.run_inference_batch(
        source, window_end=START + timedelta(days=32), window_start=START + timedelta(days=30))
    app = create_app(engine, source=source)
    return engine, TestClient(app)


class TestQueue:
    def test_unknown_incident_is_404(self, service):
        _, client = service
        response = client.get("/incidents/org0:nope")
        assert response.status_code == 404

    def test_paged_queue(self, service):
        _, client = service
        response = client.get("/incidents", params={"page": 1, "page_size": 10})
        assert response.status_code == 200
        body = response.json()
        assert len(body["incidents"]) == 10
        assert body["total"] >= 20
        row = body["incidents"][0]
        for field in ("incident", "org_id", "alert_count", "triage", "has_similar", "has_remediation"):
            assert field in row

    def test_detail_round_trips_domain_values(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[0]
        response = client.get(f"/incidents/{incident}")
        assert response.status_code == 200
        body = response.json()
        assert body["alert_count"] == len(body["alerts"])
        triage = body["triage"]
        assert Grade(triage["grade"])  # parses back into the closed enum
        assert isinstance(triage["emitted"], bool)
        assert body["triage_history"][0]["revision"] == 1
        for match in body["similar"]:
            assert match["kind"] in ("exact_hash_same_grade", "exact_hash_any_grade", "cosine")

    def test_bad_paging_rejected(self, service):
        _, client = service
        assert client.get("/incidents", params={"page": 0}).status_code == 422


class TestFeedback:
    def test_feedback_reflects_in_metrics(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[0]
        before = client.get("/metrics").json()["feedback"]["confirmed"]
        response = client.post(
            "/feedback",
            json={"incident": incident, "kind": "triage", "revision": 1, "verdict": "confirmed"},
            headers={"X-Actor-Id": "analyst-a"},
        )
        assert response.status_code == 200
        metrics = client.get("/metrics").json()["feedback"]
        assert metrics["confirmed"] == before + 1
        assert metrics["positive_rate"] is not None

    def test_one_verdict_per_actor(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[1]
        payload = {"incident": incident, "kind": "triage", "revision": 1, "verdict": "dismissed"}
        for _ in range(3):
            client.post("/feedback", json=payload, headers={"X-Actor-Id": "analyst-b"})
        counts = client.get("/metrics").json()["feedback"]
        dismissed_records = [
            r for r in FeedbackStore(engine.data_dir / "feedback.jsonl").records()
            if r["actor"] == "analyst-b" and r["incident"] == incident
        ]
        assert len(dismissed_records) == 1

    def test_unknown_revision_404(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[0]
        response = client.post(
            "/feedback", json={"incident": incident, "kind": "triage", "revision": 99, "verdict": "confirmed"})
        assert response.status_code == 404

    def test_malformed_body_names_field(self, service):
        _, client = service
        response = client.post("/feedback", json={"incident": "x", "kind": "triage", "revision": 1,
                                                  "verdict": "maybe"})
        assert response.status_code == 422
        assert "verdict" in json.dumps(response.json())

    def test_invalid_grade_rejected(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[0]
        response = client.post(
            "/feedback", json={"incident": incident, "kind": "triage", "revision": 1,
                               "verdict": "confirmed", "grade": "WAT"})
        assert response.status_code == 422


class TestFeedbackToLabels:
    def test_grade_feedback_becomes_training_label(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[2]
        client.post(
            "/feedback",
            json={"incident": incident, "kind": "triage", "revision": 1,
                  "verdict": "dismissed", "grade": "FP"},
            headers={"X-Actor-Id": "analyst-c"},
        )
        feedback = FeedbackStore(engine.data_dir / "feedback.jsonl")
        written = apply_feedback_as_labels(feedback, engine)
        assert written >= 1
        assert engine.labels.grade_for(incident) == "FP"
        # Idempotent: replaying the journal adds nothing.
        assert apply_feedback_as_labels(feedback, engine) == 0

    def test_feedback_without_grade_or_action_writes_nothing(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[3]
        client.post(
            "/feedback",
            json={"incident": incident, "kind": "triage", "revision": 1, "verdict": "confirmed"},
            headers={"X-Actor-Id": "analyst-d"},
        )
        feedback = FeedbackStore(engine.data_dir / "feedback.jsonl")
        before = len(engine.labels)
        apply_feedback_as_labels(feedback, engine)
        assert engine.labels.grade_for(incident) is None or len(engine.labels) == before

    def test_dangling_reference_skipped(self, tmp_path):
        engine = Engine(tmp_path, PipelineConfig(grid=dict(GRID), seed=1))
        feedback = FeedbackStore(engine.data_dir / "feedback.jsonl")
        feedback.put("org0:ghost", "triage", 1, "analyst", "confirmed", grade="TP")
        assert apply_feedback_as_labels(feedback, engine) == 0


class TestLabelsEndpoint:
    def test_bulk_labels_written(self, service):
        engine, client = service
        response = client.post("/labels", json={"labels": [
            {"org_id": "org9", "incident_id": "bulk1", "grade": "TP"},
            {"org_id": "org9", "incident_id": "bulk2", "action": "IsolateDevice"},
        ]})
        assert response.status_code == 200
        assert response.json()["written"] == 2
        assert engine.labels.grade_for("org9:bulk1") == "TP"


class TestAdmin:
    def test_train_via_api_consumes_feedback_labels(self, service):
        engine, client = service
        incident = engine.recommendations.incidents()[4]
        client.post(
            "/feedback",
            json={"incident": incident, "kind": "triage", "revision": 1,
                  "verdict": "dismissed", "grade": "BP"},
            headers={"X-Actor-Id": "analyst-e"},
        )
        response = client.post("/admin/run/train")
        assert response.status_code == 200
        report = response.json()["report"]
        assert report["labels_from_feedback"] >= 1
        assert report["labels_applied"] >= 1

    def test_infer_and_backfill_endpoints(self, service):
        _, client = service
        response = client.post("/admin/run/infer", json={
            "window_end": (START + timedelta(days=32)).isoformat(),
            "window_start": (START + timedelta(days=30)).isoformat(),
        })
        assert response.status_code == 200
        assert response.json()["report"]["incidents_processed"] >= 1

        response = client.post("/admin/run/backfill", json={"steps": 2})
        assert response.status_code == 200
        assert response.json()["state"]["days_covered"] == 2

    def test_admin_requires_source(self, tmp_path):
        engine = Engine(tmp_path, PipelineConfig(grid=dict(GRID), seed=1))
        client = TestClient(create_app(engine, source=None))
        assert client.post("/admin/run/train").status_code == 409
