"""Walkthrough: the three pipelines end to end on one data directory.

Runs a training cycle (weekly cadence in production), an inference batch
(15-minute cadence), and a few embedding-backfill steps (30-minute cadence),
then prints the recommendations the service would serve.
"""

import json
import tempfile
from datetime import datetime, timedelta, timezone

from socdesk import Engine, ListSource, PipelineConfig
from socdesk.synthetic import SynthConfig, generate_alerts

START = datetime(2024, 6, 1, tzinfo=timezone.utc)

config = PipelineConfig(
    grid={"n_estimators": [15], "max_depth": [16], "min_samples_split": [5],
          "class_weight": ["balanced", None]},
    seed=23,
)
engine = Engine(tempfile.mkdtemp(prefix="socdesk-engine-"), config)

print("== 1. train cycle ==")
train_alerts = generate_alerts(SynthConfig(n_incidents=1500, n_orgs=10, n_detectors=60, seed=1))
report = engine.run_train_cycle(ListSource(train_alerts))
print(f"alerts {report.alerts_total}, graded incidents {report.incidents_graded}, "
      f"sampled {report.incidents_sampled}, split {report.incident_split_sizes}")
print(f"triage: best={report.triage.best_params}, "
      f"test macro-F1 {report.triage.test_report['macro_f1']:.3f}, "
      f"accepted={report.triage.verdict['accepted']}")
print(f"remediation: test macro-F1 {report.remediation.test_report['macro_f1']:.3f}, "
      f"accepted={report.remediation.verdict['accepted']}")

print("\n== 2. inference batch over a fresh window ==")
window_start = START + timedelta(days=30)
window = generate_alerts(SynthConfig(
    n_incidents=25, n_orgs=10, n_detectors=60, seed=2,
    start=window_start, window_days=1, ungraded_fraction=1.0))
batch = engine.run_inference_batch(
    ListSource(window), window_end=window_start + timedelta(days=2), window_start=window_start)
print(f"incidents {batch.incidents_processed}, triage emitted {batch.triage_emitted} "
      f"(coverage {batch.triage_coverage:.2f}), with similar matches {batch.similar_with_matches}, "
      f"remediation incidents {batch.remediation_incidents_emitted}")

incident = engine.recommendations.incidents()[0]
print(f"\nrecommendations for {incident}:")
for kind, rec in engine.recommendations.current_by_incident(incident).items():
    print(f"  {kind} (rev {rec['revision']}): "
          f"{json.dumps(rec['payload'], sort_keys=True)[:140]}")

print("\n== 3. embedding backfill, one day deeper per step ==")
history = generate_alerts(SynthConfig(
    n_incidents=200, n_orgs=10, n_detectors=60, seed=3,
    start=START - timedelta(days=5), window_days=5, ungraded_fraction=0.5))
for _ in range(4):
    state = engine.run_backfill_step(ListSource(history), now=window_start)
print(f"backfill covered {state.days_covered} day(s); "
      f"store now holds {len(engine.embedding_store(engine.triage_champion()[2].k))} embeddings")
