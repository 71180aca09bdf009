"""HTTP/JSON service: recommendation queue, feedback capture, admin triggers.

The service is a thin, read-mostly layer over one engine's stores. Feedback
lands in an append-only journal keyed by (recommendation, actor); replaying
the journal always rebuilds the same state, and applying it as labels is
idempotent, so the next train cycle sees each analyst verdict exactly once.
"""

from __future__ import annotations

import json
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Header, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .pipeline import Engine, JournalStore, incident_key_str
from .telemetry import Action, Grade, alert_to_json

_VERDICTS = ("confirmed", "dismissed")


class FeedbackStore:
    """One verdict per (incident, kind, revision, actor); last write wins."""

    def __init__(self, path: str | Path):
        self._journal = JournalStore(path)
        self._current: dict[tuple[str, str, int, str], dict] = {}
        for record in self._journal.records():
            self._current[self._key(record)] = record

    @staticmethod
    def _key(record: dict) -> tuple[str, str, int, str]:
        return (record["incident"], record["kind"], int(record["revision"]), record["actor"])

    def put(self, incident: str, kind: str, revision: int, actor: str, verdict: str,
            grade: Optional[str] = None, action: Optional[str] = None,
            timestamp: Optional[str] = None) -> dict:
        record = {
            "incident": incident,
            "kind": kind,
            "revision": revision,
            "actor": actor,
            "verdict": verdict,
            "grade": grade,
            "action": action,
            "timestamp": timestamp or datetime.now(tz=timezone.utc).isoformat(),
        }
        key = self._key(record)
        existing = self._current.get(key)
        if existing is not None and all(existing[f] == record[f] for f in ("verdict", "grade", "action")):
            return existing
        self._journal.append(record)
        self._current[key] = record
        return record

    def records(self) -> list[dict]:
        return [self._current[key] for key in sorted(self._current)]

    def for_incident(self, incident: str) -> list[dict]:
        return [r for r in self.records() if r["incident"] == incident]

    def verdict_counts(self) -> dict[str, int]:
        counts = {v: 0 for v in _VERDICTS}
        for record in self._current.values():
            counts[record["verdict"]] += 1
        return counts

    def positive_rate(self) -> Optional[float]:
        counts = self.verdict_counts()
        total = counts["confirmed"] + counts["dismissed"]
        if total == 0:
            return None
        return counts["confirmed"] / total


def apply_feedback_as_labels(feedback: FeedbackStore, engine: Engine) -> int:
    """Write analyst grades/actions onto the referenced incidents as labels.

    Dangling references (no such recommendation revision) are counted and
    skipped. Idempotent: replaying the feedback journal writes nothing new.
    """
    written = 0
    for record in feedback.records():
        if not record.get("grade") and not record.get("action"):
            continue
        history = engine.recommendations.history(record["kind"], record["incident"])
        revisions = {h["revision"] for h in history}
        if record["revision"] not in revisions:
            continue  # dangling reference
        alert_ids: list[str] = []
        if record.get("action"):
            current = next((h for h in history if h["revision"] == record["revision"]), None)
            if current and current["kind"] == "remediation":
                alert_ids = [a["alert_id"] for a in current["payload"].get("alert_actions", ())]
        if engine.labels.put(
            record["incident"],
            grade=record.get("grade"),
            action=record.get("action"),
            alert_ids=alert_ids,
            source=f"feedback:{record['actor']}",
        ):
            written += 1
    return written


class FeedbackIn(BaseModel):
    incident: str
    kind: str = Field(pattern="^(triage|similar|remediation)$")
    revision: int = Field(ge=1)
    verdict: str = Field(pattern="^(confirmed|dismissed)$")
    grade: Optional[str] = None
    action: Optional[str] = None


class LabelIn(BaseModel):
    org_id: str
    incident_id: str
    grade: Optional[str] = None
    action: Optional[str] = None


class LabelBatchIn(BaseModel):
    labels: list[LabelIn]


class InferRequest(BaseModel):
    window_end: Optional[str] = None
    window_start: Optional[str] = None
    window_minutes: Optional[int] = Field(default=None, ge=1)


class BackfillRequest(BaseModel):
    steps: int = Field(default=1, ge=1)


def _parse_grade_or_422(raw: Optional[str]) -> Optional[str]:
    if raw is None:
        return None
    try:
        return Grade(raw).value
    except ValueError:
        raise HTTPException(status_code=422, detail=f"grade must be one of {[g.value for g in Grade]}, got {raw!r}")


def _parse_action_or_422(raw: Optional[str]) -> Optional[str]:
    if raw is None:
        return None
    try:
        return Action(raw).value
    except ValueError:
        raise HTTPException(status_code=422, detail=f"action must be one of {[a.value for a in Action]}, got {raw!r}")


def create_app(engine: Engine, source=None, console_dist: Optional[str | Path] = None) -> FastAPI:
    """Build the service over one engine and an optional telemetry source.

    The source powers the admin pipeline triggers; without one, those
    endpoints refuse with 409.
    """
    app = FastAPI(title="socdesk guided response", version="0.1.0")
    feedback = FeedbackStore(engine.data_dir / "feedback.jsonl")
    locks = {kind: threading.Lock() for kind in ("train", "infer", "backfill")}

    def incident_row(incident: str) -> Optional[dict]:
        org_id, _, incident_id = incident.partition(":")
        alerts = engine.alert_store.for_incident((org_id, incident_id))
        recs = engine.recommendations.current_by_incident(incident)
        if not alerts and not recs:
            return None
        triage = recs.get("triage")
        latest = max((a.timestamp for a in alerts), default=None)
        return {
            "incident": incident,
            "org_id": org_id,
            "incident_id": incident_id,
            "alert_count": len(alerts),
            "latest_timestamp": latest.isoformat() if latest else None,
            "triage": triage["payload"] | {"revision": triage["revision"]} if triage else None,
            "has_similar": bool(recs.get("similar") and recs["similar"]["payload"]["matches"]),
            "has_remediation": bool(recs.get("remediation") and recs["remediation"]["payload"]["emitted"]),
        }

    @app.get("/incidents")
    def list_incidents(page: int = 1, page_size: int = 50):
        if page < 1 or page_size < 1:
            raise HTTPException(status_code=422, detail="page and page_size must be >= 1")
        incidents = engine.recommendations.incidents()
        known = set(incidents)
        for key in engine.alert_store.incident_keys():
            name = incident_key_str(*key)
            if name not in known:
                incidents.append(name)
        incidents.sort()
        start = (page - 1) * page_size
        rows = [row for row in (incident_row(i) for i in incidents[start:start + page_size]) if row]
        return {"incidents": rows, "page": page, "page_size": page_size, "total": len(incidents)}

    @app.get("/incidents/{incident}")
    def incident_detail(incident: str):
        org_id, _, incident_id = incident.partition(":")
        alerts = engine.alert_store.for_incident((org_id, incident_id))
        recs = engine.recommendations.current_by_incident(incident)
        if not alerts and not recs:
            raise HTTPException(status_code=404, detail=f"unknown incident {incident!r}")
        detail = incident_row(incident) or {}
        detail["alerts"] = [alert_to_json(a) for a in alerts]
        detail["similar"] = recs["similar"]["payload"]["matches"] if recs.get("similar") else []
        detail["remediation"] = recs["remediation"]["payload"] if recs.get("remediation") else None
        detail["triage_history"] = [
            {"revision": h["revision"], **h["payload"]}
            for h in engine.recommendations.history("triage", incident)
        ]
        detail["feedback"] = feedback.for_incident(incident)
        return detail

    @app.post("/feedback")
    def post_feedback(body: FeedbackIn, x_actor_id: str = Header(default="anonymous")):
        history = engine.recommendations.history(body.kind, body.incident)
        if not any(h["revision"] == body.revision for h in history):
            raise HTTPException(
                status_code=404,
                detail=f"no {body.kind} recommendation revision {body.revision} for {body.incident!r}")
        record = feedback.put(
            incident=body.incident,
            kind=body.kind,
            revision=body.revision,
            actor=x_actor_id,
            verdict=body.verdict,
            grade=_parse_grade_or_422(body.grade),
            action=_parse_action_or_422(body.action),
        )
        return {"status": "ok", "feedback": record}

    @app.post("/labels")
    def post_labels(body: LabelBatchIn):
        written = 0
        for label in body.labels:
            written += engine.labels.put(
                incident_key_str(label.org_id, label.incident_id),
                grade=_parse_grade_or_422(label.grade),
                action=_parse_action_or_422(label.action),
            )
        return {"written": written}

    @app.get("/metrics")
    def get_metrics():
        snapshot = {}
        metrics_path = engine.data_dir / "metrics.json"
        if metrics_path.exists():
            snapshot = json.loads(metrics_path.read_text(encoding="utf-8"))
        counts = feedback.verdict_counts()
        return {
            "training": {
                "last_cycle": snapshot.get("last_train_cycle"),
                "triage_eval": snapshot.get("triage_eval"),
                "remediation_eval": snapshot.get("remediation_eval"),
            },
            "inference": snapshot.get("last_inference"),
            "feedback": {
                "confirmed": counts["confirmed"],
                "dismissed": counts["dismissed"],
                "positive_rate": feedback.positive_rate(),
            },
        }

    def _locked(kind: str):
        lock = locks[kind]
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail=f"{kind} already running")
        return lock

    @app.post("/admin/run/train")
    def run_train():
        if source is None:
            raise HTTPException(status_code=409, detail="no telemetry source configured")
        lock = _locked("train")
        try:
            labels_from_feedback = apply_feedback_as_labels(feedback, engine)
            report = engine.run_train_cycle(source)
            doc = report.to_json()
            doc["labels_from_feedback"] = labels_from_feedback
            return {"report": doc}
        finally:
            lock.release()

    @app.post("/admin/run/infer")
    def run_infer(body: InferRequest):
        if source is None:
            raise HTTPException(status_code=409, detail="no telemetry source configured")
        lock = _locked("infer")
        try:
            window_end = (datetime.fromisoformat(body.window_end) if body.window_end
                          else datetime.now(tz=timezone.utc))
            window_start = datetime.fromisoformat(body.window_start) if body.window_start else None
            if window_start is None and body.window_minutes:
                from datetime import timedelta
                window_start = window_end - timedelta(minutes=body.window_minutes)
            report = engine.run_inference_batch(source, window_end=window_end, window_start=window_start)
            return {"report": report.to_json()}
        finally:
            lock.release()

    @app.post("/admin/run/backfill")
    def run_backfill(body: BackfillRequest):
        if source is None:
            raise HTTPException(status_code=409, detail="no telemetry source configured")
        lock = _locked("backfill")
        try:
            state = engine.backfill_state()
            for _ in range(body.steps):
                state = engine.run_backfill_step(source)
            return {"state": state.to_json()}
        finally:
            lock.release()

    if console_dist and Path(console_dist).is_dir():
        app.mount("/console", StaticFiles(directory=str(console_dist), html=True), name="console")

    return app
