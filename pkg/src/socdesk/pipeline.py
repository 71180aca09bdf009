"""Orchestration of the three batch pipelines over one data directory.

The engine runs a weekly-cadence train cycle (feature engineering through
champion/challenger registration), 15-minute inference batches (triage,
similar-incident, and remediation recommendations), and a 30-minute
embedding backfill that walks one day further into history per step until
the retention horizon is covered. Cadences are configuration; steps are
triggered explicitly with a caller-supplied clock, so desk runs and tests
drive time instead of cron.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import forest as forest_mod
from . import pca as pca_mod
from .featurize import (
    EncodedAlert,
    EncoderModel,
    IncidentRecord,
    alerts_to_matrix,
    encode_alert,
    fit_encoder,
    form_incidents,
    incidents_to_matrix,
    sample_incidents,
)
from .metrics import coverage, macro_scores
from .simstore import EmbeddingEntry, EmbeddingStore, find_similar
from .telemetry import (
    Action,
    AlertRecord,
    Grade,
    alert_from_json,
    alert_to_json,
    ingest_guide_csv,
    save_split,
    stratified_split,
)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# Entity rule table: action -> ordered entity dimensions to search on the
# alert's evidence. Editable through the config file; the extractors are
# the shared evidence identity accessors.
DEFAULT_ENTITY_RULES: dict[str, list[str]] = {
    Action.CONTAIN_ACCOUNT.value: ["account"],
    Action.ISOLATE_DEVICE.value: ["device"],
    Action.STOP_VIRTUAL_MACHINE.value: ["resource"],
}

_ENTITY_EXTRACTORS = {
    "account": lambda e: e.account_identity(),
    "device": lambda e: e.device_identity(),
    "resource": lambda e: e.resource_id_name,
    "application": lambda e: e.application_identity(),
    "ip": lambda e: e.ip_address,
    "url": lambda e: e.url,
    "file": lambda e: e.sha256 or e.file_name,
}

DEFAULT_GRID: dict = {
    "n_estimators": [100, 200, 300, 400],
    "max_depth": [30, 50, 75, 100],
    "min_samples_split": [5, 10, 15],
    "class_weight": ["balanced", None],
}


@dataclass
class PipelineConfig:
    min_cardinality: int = 10
    pca_components: int = 40
    variance_target: float = 0.95
    sample_cap: int = 1000
    store_cap: int = 5
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    target_precision: float = 0.9
    cosine_cutoff: float = 0.9
    horizon_days: int = 180
    inference_window_minutes: int = 15
    backfill_cadence_minutes: int = 30
    train_cadence_days: int = 7
    validation_tolerance: float = 0.03
    split_fractions: tuple[float, ...] = (0.70, 0.10, 0.20)
    seed: int = 7
    grid_jobs: int = 1
    max_similar: int = 5
    entity_rules: dict = field(default_factory=lambda: dict(DEFAULT_ENTITY_RULES))

    def validate(self) -> None:
        for name in ("min_cardinality", "pca_components", "sample_cap", "store_cap",
                     "horizon_days", "inference_window_minutes", "backfill_cadence_minutes",
                     "train_cadence_days", "grid_jobs", "max_similar"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("variance_target", "target_precision", "cosine_cutoff", "validation_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.inference_window_minutes > self.horizon_days * 24 * 60:
            raise ValueError("inference window must not exceed the retention horizon")

    @property
    def horizon(self) -> timedelta:
        return timedelta(days=self.horizon_days)

    def save(self, path: str | Path) -> None:
        """Write the key=value config file; lists and maps are JSON values."""
        lines = ["# socdesk pipeline configuration (key = value; JSON for structured values)"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{f.name} = {json.dumps(value)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        values: dict = {}
        names = {f.name for f in fields(cls)}
        for raw_line in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw_line!r}")
            key, _, raw_value = line.partition("=")
            key = key.strip()
            if key not in names:
                raise ValueError(f"unknown config key: {key}")
            values[key] = json.loads(raw_value.strip())
        if "split_fractions" in values:
            values["split_fractions"] = tuple(values["split_fractions"])
        config = cls(**values)
        config.validate()
        return config


# ---------------------------------------------------------------------------
# Telemetry sources
# ---------------------------------------------------------------------------

class ListSource:
    """In-memory telemetry source; re-iterable and time-filterable."""

    def __init__(self, records: Sequence[AlertRecord]):
        self._records = list(records)

    def alerts(self, start: Optional[datetime] = None, end: Optional[datetime] = None) -> Iterator[AlertRecord]:
        for record in self._records:
            if start is not None and record.timestamp < start:
                continue
            if end is not None and record.timestamp >= end:
                continue
            yield record


class CsvSource:
    """GUIDE CSV telemetry source; re-reads the file on each pass."""

    def __init__(self, path: str | Path, limit: Optional[int] = None):
        self.path = Path(path)
        self.limit = limit

    def alerts(self, start: Optional[datetime] = None, end: Optional[datetime] = None) -> Iterator[AlertRecord]:
        for record in ingest_guide_csv(self.path, limit=self.limit):
            if start is not None and record.timestamp < start:
                continue
            if end is not None and record.timestamp >= end:
                continue
            yield record


# ---------------------------------------------------------------------------
# Recommendations and journaled stores
# ---------------------------------------------------------------------------

def incident_key_str(org_id: str, incident_id: str) -> str:
    return f"{org_id}:{incident_id}"


def _canonical(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


class JournalStore:
    """Append-only JSONL journal with replay-on-open semantics."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._records: list[dict] = []
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._records.append(json.loads(line))

    def append(self, record: dict) -> None:
        self._records.append(record)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(_canonical(record) + "\n")

    def records(self) -> list[dict]:
        return list(self._records)


class RecommendationStore:
    """Current and historical recommendations, keyed by (kind, incident, revision).

    A put with an unchanged identity is a no-op, so replaying a window adds
    nothing; a changed identity appends the next revision and keeps the prior
    one for audit.
    """

    KINDS = ("triage", "similar", "remediation")

    def __init__(self, path: str | Path):
        self._journal = JournalStore(path)
        self._current: dict[tuple[str, str], dict] = {}
        self._history: dict[tuple[str, str], list[dict]] = {}
        for record in self._journal.records():
            self._apply(record)

    def _apply(self, record: dict) -> None:
        key = (record["kind"], record["incident"])
        self._current[key] = record
        self._history.setdefault(key, []).append(record)

    def put(self, kind: str, incident: str, identity, payload: dict) -> tuple[int, bool]:
        """Returns (revision, changed)."""
        if kind not in self.KINDS:
            raise ValueError(f"unknown recommendation kind {kind!r}")
        key = (kind, incident)
        current = self._current.get(key)
        identity_json = _canonical(identity)
        if current is not None and current["identity"] == identity_json:
            return current["revision"], False
        revision = (current["revision"] + 1) if current is not None else 1
        record = {
            "kind": kind,
            "incident": incident,
            "revision": revision,
            "identity": identity_json,
            "payload": payload,
        }
        self._journal.append(record)
        self._apply(record)
        return revision, True

    def current(self, kind: str, incident: str) -> Optional[dict]:
        return self._current.get((kind, incident))

    def history(self, kind: str, incident: str) -> list[dict]:
        return list(self._history.get((kind, incident), ()))

    def incidents(self) -> list[str]:
        return sorted({incident for _, incident in self._current})

    def current_by_incident(self, incident: str) -> dict[str, dict]:
        return {kind: rec for (kind, inc), rec in self._current.items() if inc == incident}

    def __len__(self) -> int:
        return sum(len(records) for records in self._history.values())


class AlertStore:
    """Journal of normalized alerts; upsert by alert_id, replay-stable."""

    def __init__(self, path: str | Path):
        self._journal = JournalStore(path)
        self._alerts: dict[str, AlertRecord] = {}
        self._by_incident: dict[tuple[str, str], list[str]] = {}
        for record in self._journal.records():
            self._remember(alert_from_json(record["alert"]))

    def _remember(self, alert: AlertRecord) -> None:
        existing = self._alerts.get(alert.alert_id)
        self._alerts[alert.alert_id] = alert
        if existing is None:
            self._by_incident.setdefault(alert.incident_key, []).append(alert.alert_id)
        elif existing.incident_key != alert.incident_key:
            old = self._by_incident.get(existing.incident_key, [])
            if alert.alert_id in old:
                old.remove(alert.alert_id)
            if not old:
                self._by_incident.pop(existing.incident_key, None)
            self._by_incident.setdefault(alert.incident_key, []).append(alert.alert_id)

    def put_many(self, alerts: Iterable[AlertRecord]) -> int:
        """Store alerts; unchanged re-puts are no-ops. Returns new/changed count."""
        written = 0
        for alert in alerts:
            doc = alert_to_json(alert)
            existing = self._alerts.get(alert.alert_id)
            if existing is not None and _canonical(alert_to_json(existing)) == _canonical(doc):
                continue
            self._journal.append({"alert": doc})
            self._remember(alert)
            written += 1
        return written

    def for_incident(self, key: tuple[str, str]) -> list[AlertRecord]:
        return [self._alerts[a] for a in self._by_incident.get(key, ())]

    def incident_keys(self) -> list[tuple[str, str]]:
        return sorted(self._by_incident)

    def get(self, alert_id: str) -> Optional[AlertRecord]:
        return self._alerts.get(alert_id)

    def __len__(self) -> int:
        return len(self._alerts)


class LabelStore:
    """Analyst-supplied grade/action labels, applied onto incidents' alerts."""

    def __init__(self, path: str | Path):
        self._journal = JournalStore(path)
        self._grades: dict[str, str] = {}
        self._actions: dict[str, dict] = {}
        for record in self._journal.records():
            self._apply(record)

    def _apply(self, record: dict) -> None:
        incident = record["incident"]
        if record.get("grade"):
            self._grades[incident] = record["grade"]
        if record.get("action"):
            self._actions[incident] = {"action": record["action"], "alert_ids": record.get("alert_ids") or []}

    def put(self, incident: str, grade: Optional[str] = None, action: Optional[str] = None,
            alert_ids: Optional[Sequence[str]] = None, source: str = "bulk") -> bool:
        """Record labels; returns False when the state already holds them."""
        if not grade and not action:
            return False
        unchanged_grade = not grade or self._grades.get(incident) == grade
        current_action = self._actions.get(incident)
        unchanged_action = not action or (
            current_action is not None
            and current_action["action"] == action
            and current_action["alert_ids"] == list(alert_ids or [])
        )
        if unchanged_grade and unchanged_action:
            return False
        record = {
            "incident": incident,
            "grade": grade,
            "action": action,
            "alert_ids": list(alert_ids or []),
            "source": source,
        }
        self._journal.append(record)
        self._apply(record)
        return True

    def grade_for(self, incident: str) -> Optional[str]:
        return self._grades.get(incident)

    def action_for(self, incident: str) -> Optional[dict]:
        return self._actions.get(incident)

    def __len__(self) -> int:
        return len(set(self._grades) | set(self._actions))

    def apply_to(self, alert: AlertRecord) -> AlertRecord:
        incident = incident_key_str(alert.org_id, alert.incident_id)
        grade = self._grades.get(incident)
        action_doc = self._actions.get(incident)
        new_grade = Grade(grade) if grade else alert.grade
        new_action = alert.action
        if action_doc and (not action_doc["alert_ids"] or alert.alert_id in action_doc["alert_ids"]):
            new_action = Action(action_doc["action"])
        if new_grade is alert.grade and new_action is alert.action:
            return alert
        return replace(alert, grade=new_grade, action=new_action)


# ---------------------------------------------------------------------------
# Remediation entity rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EntityRef:
    kind: str
    identity: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "identity": self.identity}


def identify_entity(alert: AlertRecord, action: Action, rules: Optional[dict] = None) -> Optional[EntityRef]:
    """Pick the entity an action should target, or None when nothing fits.

    The rule table maps each action to the entity dimensions to search.
    Impacted-role evidence wins over related evidence; remaining ties break
    on the identity string.
    """
    rules = rules or DEFAULT_ENTITY_RULES
    candidates: list[tuple[int, str, str]] = []
    for dimension in rules.get(action.value, ()):
        extractor = _ENTITY_EXTRACTORS.get(dimension)
        if extractor is None:
            raise ValueError(f"unknown entity dimension {dimension!r} in rule table")
        for evidence in alert.evidence:
            identity = extractor(evidence)
            if identity:
                impacted = 0 if evidence.evidence_role.lower() == "impacted" else 1
                candidates.append((impacted, identity, dimension))
    if not candidates:
        return None
    impacted, identity, dimension = min(candidates)
    return EntityRef(kind=dimension, identity=identity)


@dataclass
class AlertActionRec:
    alert_id: str
    action: Action
    score: float
    emitted: bool
    entity: Optional[EntityRef]

    @property
    def without_target(self) -> bool:
        return self.emitted and self.entity is None

    def to_json(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "action": self.action.value,
            "score": self.score,
            "emitted": self.emitted,
            "entity": self.entity.to_json() if self.entity else None,
            "without_target": self.without_target,
        }


def aggregate_remediation(alert_recs: Sequence[AlertActionRec]) -> list[dict]:
    """Dedupe emitted (action, entity) pairs, keeping the best score per pair."""
    emitted = [rec for rec in alert_recs if rec.emitted]
    if not emitted:
        raise ValueError("aggregation needs at least one emitted alert recommendation")
    best: dict[tuple[str, str, str], dict] = {}
    for rec in emitted:
        entity = rec.entity.to_json() if rec.entity else None
        pair = (rec.action.value, rec.entity.kind if rec.entity else "", rec.entity.identity if rec.entity else "")
        doc = best.get(pair)
        if doc is None or rec.score > doc["score"]:
            best[pair] = {
                "action": rec.action.value,
                "entity": entity,
                "score": rec.score,
                "without_target": rec.entity is None,
            }
    return [best[pair] for pair in sorted(best)]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class TaskTrainingSummary:
    skipped: bool = False
    reason: Optional[str] = None
    grid_points: int = 0
    best_params: Optional[dict] = None
    validation_macro_f1: Optional[float] = None
    test_report: Optional[dict] = None
    thresholds: Optional[dict] = None
    verdict: Optional[dict] = None
    train_seconds: float = 0.0
    model_version: Optional[int] = None

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class TrainCycleReport:
    cycle: str
    alerts_total: int = 0
    alerts_actioned: int = 0
    incidents_total: int = 0
    incidents_graded: int = 0
    incidents_sampled: int = 0
    labels_applied: int = 0
    encode_dim: int = 0
    incident_split_sizes: tuple[int, int, int] = (0, 0, 0)
    action_split_sizes: tuple[int, int, int] = (0, 0, 0)
    pca_incident_k: int = 0
    pca_incident_captured: float = 0.0
    pca_alert_k: int = 0
    pca_alert_captured: float = 0.0
    embeddings_upserted: int = 0
    triage: TaskTrainingSummary = field(default_factory=TaskTrainingSummary)
    remediation: TaskTrainingSummary = field(default_factory=TaskTrainingSummary)
    seed: int = 0

    def to_json(self) -> dict:
        doc = self.__dict__.copy()
        doc["incident_split_sizes"] = list(self.incident_split_sizes)
        doc["action_split_sizes"] = list(self.action_split_sizes)
        doc["triage"] = self.triage.to_json()
        doc["remediation"] = self.remediation.to_json()
        return doc


@dataclass
class InferenceReport:
    window_start: str
    window_end: str
    alerts_in_window: int = 0
    incidents_processed: int = 0
    triage_emitted: int = 0
    triage_coverage: float = 0.0
    similar_with_matches: int = 0
    remediation_alerts_emitted: int = 0
    remediation_incidents_emitted: int = 0
    recommendations_written: int = 0
    recommendations_unchanged: int = 0
    revised_incidents: int = 0
    embeddings_upserted: int = 0

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class BackfillState:
    anchor: str = ""
    days_covered: int = 0

    def to_json(self) -> dict:
        return {"anchor": self.anchor, "days_covered": self.days_covered}


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

class Engine:
    """One data directory's pipelines, stores, and model registries."""

    def __init__(self, data_dir: str | Path, config: Optional[PipelineConfig] = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        config_path = self.data_dir / "pipeline.conf"
        if config is None:
            config = PipelineConfig.load(config_path) if config_path.exists() else PipelineConfig()
        config.validate()
        self.config = config
        if not config_path.exists():
            config.save(config_path)

        self.triage_registry = forest_mod.ModelRegistry(self.data_dir / "registry" / "triage")
        self.remediation_registry = forest_mod.ModelRegistry(self.data_dir / "registry" / "remediation")
        self.cycles_dir = self.data_dir / "cycles"
        self.cycles_dir.mkdir(exist_ok=True)
        self.reports_dir = self.data_dir / "reports"
        self.reports_dir.mkdir(exist_ok=True)
        self.recommendations = RecommendationStore(self.data_dir / "recommendations.jsonl")
        self.alert_store = AlertStore(self.data_dir / "alerts.jsonl")
        self.labels = LabelStore(self.data_dir / "labels.jsonl")
        self._embedding_store: Optional[EmbeddingStore] = None

    # -- champions -----------------------------------------------------------

    def _champion(self, registry: forest_mod.ModelRegistry):
        model = registry.champion()
        if model is None:
            return None
        manifest = registry.champion_manifest() or {}
        cycle = manifest.get("artifacts", {}).get("cycle")
        if cycle is None:
            raise PipelineError("champion bundle lacks its cycle artifacts")
        cycle_dir = self.cycles_dir / cycle
        encoder = EncoderModel.load(cycle_dir / "encoder.json")
        incident_path = cycle_dir / "pca_incident.bin"
        alert_path = cycle_dir / "pca_alert.bin"
        pca_incident = pca_mod.load_pca(incident_path) if incident_path.exists() else None
        pca_alert = pca_mod.load_pca(alert_path) if alert_path.exists() else None
        return model, encoder, pca_incident, pca_alert

    def triage_champion(self):
        return self._champion(self.triage_registry)

    def remediation_champion(self):
        return self._champion(self.remediation_registry)

    def embedding_store(self, k: int) -> EmbeddingStore:
        root = self.data_dir / "embeddings"
        if self._embedding_store is not None and self._embedding_store.k == k:
            return self._embedding_store
        try:
            self._embedding_store = EmbeddingStore(root, k=k)
        except ValueError:
            # Embedding width changed with a new champion; retire stale logs.
            stale = self.data_dir / f"embeddings_stale_{int(time.time())}"
            root.rename(stale)
            log.warning("embedding store dimension changed; retired old logs to %s", stale.name)
            self._embedding_store = EmbeddingStore(root, k=k)
        return self._embedding_store

    # -- train cycle ---------------------------------------------------------

    def _labeled_alerts(self, source, start=None, end=None) -> Iterator[AlertRecord]:
        for alert in source.alerts(start, end):
            yield self.labels.apply_to(alert)

    def _next_cycle_name(self) -> str:
        existing = [int(p.name[5:]) for p in self.cycles_dir.iterdir()
                    if p.is_dir() and p.name.startswith("cycle") and p.name[5:].isdigit()]
        return f"cycle{(max(existing) + 1 if existing else 1):04d}"

    def run_train_cycle(self, source, now: Optional[datetime] = None) -> TrainCycleReport:
        """Full training pass: encode, form, sample, reduce, train, validate.

        Any failure aborts the cycle before registry writes, leaving prior
        champions live.
        """
        config = self.config
        cycle = self._next_cycle_name()
        report = TrainCycleReport(cycle=cycle, seed=config.seed)

        try:
            encoder = fit_encoder(self._labeled_alerts(source), min_cardinality=config.min_cardinality)
        except ValueError as exc:
            raise PipelineError(str(exc)) from exc
        report.encode_dim = encoder.encode_dim

        encoded: list[EncodedAlert] = []
        for alert in source.alerts():
            labeled = self.labels.apply_to(alert)
            if labeled is not alert:
                report.labels_applied += 1
            encoded.append(encode_alert(encoder, labeled))
        report.alerts_total = len(encoded)
        if not encoded:
            raise PipelineError("telemetry source produced no alerts")

        actioned = [a for a in encoded if a.action is not None]
        report.alerts_actioned = len(actioned)

        incidents = form_incidents(encoded, require_grade=False)
        report.incidents_total = len(incidents)
        graded = [i for i in incidents if i.grade is not None]
        report.incidents_graded = len(graded)

        sampled = sample_incidents(graded, cap=config.sample_cap, seed=config.seed)
        report.incidents_sampled = len(sampled)

        cycle_dir = self.cycles_dir / cycle
        cycle_dir.mkdir(parents=True)
        encoder.save(cycle_dir / "encoder.json")

        # Dimensionality reduction is fit independently per dataframe.
        X_alerts = alerts_to_matrix(encoder, encoded)
        pca_alert = pca_mod.fit_pca(X_alerts, k=config.pca_components, variance_target=config.variance_target)
        pca_mod.save_pca(pca_alert, cycle_dir / "pca_alert.bin")
        report.pca_alert_k = pca_alert.k
        report.pca_alert_captured = pca_alert.captured_variance()

        triage_summary = TaskTrainingSummary()
        report.triage = triage_summary
        if len(sampled) >= 10 and len({i.grade for i in sampled}) >= 2:
            X_incidents = incidents_to_matrix(encoder, sampled)
            pca_incident = pca_mod.fit_pca(X_incidents, k=config.pca_components, variance_target=config.variance_target)
            pca_mod.save_pca(pca_incident, cycle_dir / "pca_incident.bin")
            report.pca_incident_k = pca_incident.k
            report.pca_incident_captured = pca_incident.captured_variance()
            Z = pca_mod.transform_matrix(pca_incident, X_incidents)

            split = stratified_split(
                sampled, fractions=config.split_fractions,
                strata=lambda r: r.grade_tag, seed=config.seed,
            )
            save_split(split, cycle_dir / "incident_split.txt")
            report.incident_split_sizes = split.sizes
            self._train_task(
                registry=self.triage_registry,
                summary=triage_summary,
                rows=sampled,
                matrix=Z,
                labels=[i.grade_tag for i in sampled],
                row_ids=[incident_key_str(*i.incident_key) for i in sampled],
                split=split,
                cycle=cycle,
                task="triage",
            )

            # Store sampled incident embeddings for similarity retrieval.
            store = self.embedding_store(pca_incident.k)
            entries = [
                EmbeddingEntry(
                    org_id=incident.org_id,
                    incident_id=incident.incident_id,
                    incident_hash=incident.incident_hash,
                    grade_tag=incident.grade_tag,
                    embedding=Z[i],
                    timestamp=incident.latest_timestamp,
                )
                for i, incident in enumerate(sampled)
            ]
            report.embeddings_upserted = store.upsert(entries, cap=config.store_cap)
        else:
            triage_summary.skipped = True
            triage_summary.reason = "not enough graded incidents (need >= 10 across >= 2 grades)"
            # The alert-side reduction still ran; persist an incident model
            # only when triage trains, since the store is keyed to it.

        remediation_summary = TaskTrainingSummary()
        report.remediation = remediation_summary
        if len(actioned) >= 10 and len({a.action for a in actioned}) >= 2:
            act_positions = [i for i, a in enumerate(encoded) if a.action is not None]
            Z_alerts = pca_mod.transform_matrix(pca_alert, X_alerts[act_positions])
            actioned_alerts = [encoded[i] for i in act_positions]
            split = stratified_split(
                actioned_alerts, fractions=config.split_fractions,
                strata=lambda r: r.action.value, seed=config.seed,
            )
            save_split(split, cycle_dir / "action_split.txt")
            report.action_split_sizes = split.sizes
            self._train_task(
                registry=self.remediation_registry,
                summary=remediation_summary,
                rows=actioned_alerts,
                matrix=Z_alerts,
                labels=[a.action.value for a in actioned_alerts],
                row_ids=[a.alert_id for a in actioned_alerts],
                split=split,
                cycle=cycle,
                task="remediation",
            )
        else:
            remediation_summary.skipped = True
            remediation_summary.reason = "not enough actioned alerts (need >= 10 across >= 2 actions)"

        report_path = self.reports_dir / f"{cycle}.json"
        report_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._write_metrics_snapshot(report)
        return report

    def _train_task(self, registry, summary: TaskTrainingSummary, rows, matrix, labels,
                    row_ids, split, cycle: str, task: str) -> None:
        config = self.config
        started = time.monotonic()
        keys = [r.incident_key for r in rows]
        part = [split.part_of(k) for k in keys]
        train_idx = [i for i, p in enumerate(part) if p == "train"]
        val_idx = [i for i, p in enumerate(part) if p == "val"]
        test_idx = [i for i, p in enumerate(part) if p == "test"]
        if not train_idx or not val_idx or not test_idx:
            summary.skipped = True
            summary.reason = f"degenerate split for {task}: {len(train_idx)}/{len(val_idx)}/{len(test_idx)}"
            return

        y = np.asarray(labels)
        if len(set(y[train_idx])) < 2:
            summary.skipped = True
            summary.reason = f"fewer than 2 classes in the {task} train split"
            return

        grid = forest_mod.expand_grid({**config.grid, "seed": config.seed})
        summary.grid_points = len(grid)
        result = forest_mod.grid_search(
            train=(matrix[train_idx], y[train_idx].tolist()),
            val=(matrix[val_idx], y[val_idx].tolist()),
            grid=grid,
            n_jobs=config.grid_jobs,
        )
        model = result.best
        summary.best_params = model.params.to_json()
        summary.validation_macro_f1 = result.best_macro_f1

        val_classes = set(y[val_idx])
        if set(model.classes) <= val_classes:
            model.thresholds = forest_mod.calibrate_thresholds(
                model, matrix[val_idx], y[val_idx].tolist(), target_precision=config.target_precision)
        else:
            missing = set(model.classes) - val_classes
            log.warning("%s calibration skipped for classes absent from val: %s", task, sorted(missing))
            model.thresholds = {c: float("inf") for c in model.classes}
        summary.thresholds = {c: (None if np.isinf(t) else t) for c, t in model.thresholds.items()}

        scores = forest_mod.predict_scores(model, matrix[test_idx])
        predictions = np.asarray(model.classes)[np.argmax(scores, axis=1)]
        emitted = forest_mod.emitted_mask(model, scores)
        eval_classes = sorted(set(model.classes) | set(y[test_idx]))
        test_report = macro_scores(
            predictions.tolist(), y[test_idx].tolist(), classes=eval_classes,
            coverage_value=coverage(emitted.tolist()),
        )
        summary.test_report = test_report.to_json()
        model.metrics.update({
            "macro_f1": test_report.macro_f1,
            "macro_precision": test_report.macro_precision,
            "macro_recall": test_report.macro_recall,
            "validation_macro_f1": result.best_macro_f1,
            "test_coverage": test_report.coverage,
            "input_dim": int(matrix.shape[1]),
        })
        verdict = registry.validate_and_store(
            model, tolerance=config.validation_tolerance,
            extra_manifest={"artifacts": {"cycle": cycle}, "task": task},
        )
        summary.verdict = verdict.to_json()
        summary.model_version = model.version
        summary.train_seconds = time.monotonic() - started

    def _write_metrics_snapshot(self, report: TrainCycleReport) -> None:
        path = self.data_dir / "metrics.json"
        snapshot = {}
        if path.exists():
            snapshot = json.loads(path.read_text(encoding="utf-8"))
        snapshot["last_train_cycle"] = report.cycle
        if report.triage.test_report:
            snapshot["triage_eval"] = report.triage.test_report
        if report.remediation.test_report:
            snapshot["remediation_eval"] = report.remediation.test_report
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # -- inference -----------------------------------------------------------

    def run_inference_batch(
        self,
        source,
        window_end: datetime,
        window_start: Optional[datetime] = None,
    ) -> InferenceReport:
        """Score one telemetry window and persist recommendations.

        Incidents touched by the window are recomputed from all their known
        alerts, so an evolving incident is re-scored in full; an unchanged
        recommendation is never duplicated.
        """
        config = self.config
        if window_start is None:
            window_start = window_end - timedelta(minutes=config.inference_window_minutes)
        report = InferenceReport(window_start=window_start.isoformat(), window_end=window_end.isoformat())

        triage = self.triage_champion()
        remediation = self.remediation_champion()
        if triage is None or remediation is None:
            raise PipelineError("inference requires both triage and remediation champion models")
        triage_model, triage_encoder, pca_incident, _ = triage
        remediation_model, remediation_encoder, _, pca_alert = remediation

        window_alerts = list(source.alerts(window_start, window_end))
        report.alerts_in_window = len(window_alerts)
        if not window_alerts:
            return report

        self.alert_store.put_many(window_alerts)
        touched = sorted({a.incident_key for a in window_alerts})
        report.incidents_processed = len(touched)

        store = self.embedding_store(pca_incident.k)

        # Recompute every touched incident from its full alert set.
        incident_alerts: dict[tuple[str, str], list[AlertRecord]] = {
            key: self.alert_store.for_incident(key) for key in touched
        }
        encoded_for_triage = {
            key: [encode_alert(triage_encoder, a) for a in alerts]
            for key, alerts in incident_alerts.items()
        }
        incidents = {key: form_incidents(encoded_for_triage[key])[0] for key in touched}

        matrix = incidents_to_matrix(triage_encoder, [incidents[key] for key in touched])
        Z = pca_mod.transform_matrix(pca_incident, matrix)
        scores = forest_mod.predict_scores(triage_model, Z)
        winners = np.argmax(scores, axis=1)
        emitted_flags = forest_mod.emitted_mask(triage_model, scores)

        events = {"written": 0, "unchanged": 0, "revised": 0}

        def record(kind: str, incident: str, identity, payload: dict) -> None:
            existed = self.recommendations.current(kind, incident) is not None
            revision, changed = self.recommendations.put(kind, incident, identity, payload)
            if changed:
                events["written"] += 1
                if existed:
                    events["revised"] += 1
            else:
                events["unchanged"] += 1

        emb_entries = []
        for i, key in enumerate(touched):
            incident = incidents[key]
            incident_name = incident_key_str(*key)
            grade_value = str(triage_model.classes[winners[i]])
            grade_score = float(scores[i, winners[i]])
            is_emitted = bool(emitted_flags[i])
            report.triage_emitted += int(is_emitted)

            record(
                "triage", incident_name,
                identity={"grade": grade_value, "emitted": is_emitted},
                payload={
                    "grade": grade_value,
                    "score": grade_score,
                    "emitted": is_emitted,
                    "model_version": triage_model.version,
                    "scores": {c: float(scores[i, j]) for j, c in enumerate(triage_model.classes)},
                },
            )

            emb_entries.append(EmbeddingEntry(
                org_id=incident.org_id,
                incident_id=incident.incident_id,
                incident_hash=incident.incident_hash,
                grade_tag=incident.grade_tag,
                embedding=Z[i],
                timestamp=incident.latest_timestamp,
                predicted_grade=grade_value,
            ))

        report.embeddings_upserted = store.upsert(emb_entries, cap=config.store_cap)

        for i, key in enumerate(touched):
            incident = incidents[key]
            incident_name = incident_key_str(*key)
            grade_value = str(triage_model.classes[winners[i]])
            matches = find_similar(
                store,
                org_id=incident.org_id,
                incident_hash=incident.incident_hash,
                query=Z[i],
                grade_rec=grade_value,
                k_max=config.max_similar,
                cutoff=config.cosine_cutoff,
                horizon=config.horizon,
                now=window_end,
                exclude_incident_id=incident.incident_id,
            )
            if matches:
                report.similar_with_matches += 1
            record(
                "similar", incident_name,
                identity=[[m.incident_id, m.kind.value] for m in matches],
                payload={"matches": [
                    {
                        "incident_id": m.incident_id,
                        "kind": m.kind.value,
                        "score": m.score,
                        "timestamp": m.timestamp.isoformat(),
                    } for m in matches
                ]},
            )

        # Remediation: score every alert of the touched incidents.
        for key in touched:
            incident_name = incident_key_str(*key)
            alerts = incident_alerts[key]
            encoded = [encode_alert(remediation_encoder, a) for a in alerts]
            Za = pca_mod.transform_matrix(pca_alert, alerts_to_matrix(remediation_encoder, encoded))
            ascores = forest_mod.predict_scores(remediation_model, Za)
            awin = np.argmax(ascores, axis=1)
            aemit = forest_mod.emitted_mask(remediation_model, ascores)
            alert_recs = []
            for j, alert in enumerate(alerts):
                action = Action(str(remediation_model.classes[awin[j]]))
                is_emitted = bool(aemit[j])
                entity = identify_entity(alert, action, self.config.entity_rules) if is_emitted else None
                alert_recs.append(AlertActionRec(
                    alert_id=alert.alert_id,
                    action=action,
                    score=float(ascores[j, awin[j]]),
                    emitted=is_emitted,
                    entity=entity,
                ))
            emitted_recs = [r for r in alert_recs if r.emitted]
            report.remediation_alerts_emitted += len(emitted_recs)
            aggregated = aggregate_remediation(alert_recs) if emitted_recs else []
            if aggregated:
                report.remediation_incidents_emitted += 1
            record(
                "remediation", incident_name,
                identity=[[d["action"], d["entity"]["identity"] if d["entity"] else ""] for d in aggregated],
                payload={
                    "alert_actions": [r.to_json() for r in alert_recs if r.emitted],
                    "aggregated": aggregated,
                    "emitted": bool(aggregated),
                    "model_version": remediation_model.version,
                },
            )

        report.triage_coverage = report.triage_emitted / len(touched) if touched else 0.0
        report.recommendations_written = events["written"]
        report.recommendations_unchanged = events["unchanged"]
        report.revised_incidents = events["revised"]
        self._write_inference_snapshot(report)
        return report

    def _write_inference_snapshot(self, report: InferenceReport) -> None:
        path = self.data_dir / "metrics.json"
        snapshot = {}
        if path.exists():
            snapshot = json.loads(path.read_text(encoding="utf-8"))
        snapshot["last_inference"] = report.to_json()
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def update_on_evolution(self, source, incident_key: tuple[str, str], now: datetime) -> Optional[dict]:
        """Re-score one incident after new alerts arrived; returns the triage rec."""
        window_start = now - timedelta(minutes=self.config.inference_window_minutes)
        self.run_inference_batch(source, window_end=now, window_start=window_start)
        return self.recommendations.current("triage", incident_key_str(*incident_key))

    # -- backfill ------------------------------------------------------------

    @property
    def _backfill_path(self) -> Path:
        return self.data_dir / "backfill.json"

    def backfill_state(self) -> BackfillState:
        if self._backfill_path.exists():
            doc = json.loads(self._backfill_path.read_text(encoding="utf-8"))
            return BackfillState(anchor=doc["anchor"], days_covered=int(doc["days_covered"]))
        return BackfillState()

    def run_backfill_step(self, source, now: Optional[datetime] = None) -> BackfillState:
        """Embed one more day of history, newest-first, up to the horizon."""
        state = self.backfill_state()
        if state.days_covered >= self.config.horizon_days:
            return state
        if not state.anchor:
            if now is None:
                now = datetime.now(tz=timezone.utc)
            state.anchor = now.isoformat()

        triage = self.triage_champion()
        if triage is None:
            raise PipelineError("backfill requires a triage champion (encoder and reducer)")
        _, encoder, pca_incident, _ = triage

        anchor = datetime.fromisoformat(state.anchor)
        day = state.days_covered
        start = anchor - timedelta(days=day + 1)
        end = anchor - timedelta(days=day)

        alerts = [encode_alert(encoder, a) for a in self._labeled_alerts(source, start, end)]
        if alerts:
            incidents = form_incidents(alerts, require_grade=False)
            Z = pca_mod.transform_matrix(pca_incident, incidents_to_matrix(encoder, incidents))
            store = self.embedding_store(pca_incident.k)
            entries = [
                EmbeddingEntry(
                    org_id=incident.org_id,
                    incident_id=incident.incident_id,
                    incident_hash=incident.incident_hash,
                    grade_tag=incident.grade_tag,
                    embedding=Z[i],
                    timestamp=incident.latest_timestamp,
                )
                for i, incident in enumerate(incidents)
            ]
            store.upsert(entries, cap=self.config.store_cap)

        state.days_covered = day + 1
        self._backfill_path.write_text(json.dumps(state.to_json(), sort_keys=True) + "\n", encoding="utf-8")
        return state
