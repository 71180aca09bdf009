"""Command-line entry points: ingest, train, infer, backfill, eval, serve, synth."""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import forest as forest_mod
from . import pca as pca_mod
from .featurize import alerts_to_matrix, encode_alert, form_incidents, incidents_to_matrix
from .metrics import coverage, macro_scores
from .pipeline import CsvSource, Engine, PipelineConfig, PipelineError
from .synthetic import SynthConfig, generate_alerts, write_guide_csv
from .telemetry import IngestStats, ingest_guide_csv

DATA_DIR_ENV = "SOCDESK_DATA_DIR"


def _data_dir(args) -> Path:
    raw = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if not raw:
        sys.exit(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    return Path(raw)


def _engine(args) -> Engine:
    data_dir = _data_dir(args)
    config = None
    if getattr(args, "config", None):
        config = PipelineConfig.load(args.config)
    return Engine(data_dir, config)


def _source(args) -> CsvSource:
    if not args.telemetry:
        sys.exit("no telemetry: pass --telemetry <guide.csv>")
    return CsvSource(args.telemetry)


def cmd_synth(args) -> None:
    start = datetime.fromisoformat(args.start) if args.start else datetime(2024, 6, 1, tzinfo=timezone.utc)
    config = SynthConfig(
        n_incidents=args.incidents,
        n_orgs=args.orgs,
        n_detectors=args.detectors,
        seed=args.seed,
        start=start,
        window_days=args.window_days,
        ungraded_fraction=args.ungraded_fraction,
    )
    alerts = generate_alerts(config)
    rows = write_guide_csv(alerts, args.out)
    print(f"wrote {rows} evidence rows / {len(alerts)} alerts / {args.incidents} incidents to {args.out}")


def cmd_ingest(args) -> None:
    stats = IngestStats()
    alerts = 0
    incidents = set()
    graded = 0
    actioned = 0
    for record in ingest_guide_csv(args.telemetry, limit=args.limit, stats=stats):
        alerts += 1
        incidents.add(record.incident_key)
        graded += record.grade is not None
        actioned += record.action is not None
    print(f"rows read:          {stats.rows_read}")
    print(f"evidence rows:      {stats.evidence_rows}")
    print(f"malformed rows:     {stats.malformed_rows}")
    print(f"timestamp errors:   {stats.timestamp_errors}")
    print(f"unknown entities:   {stats.unknown_entity_types}")
    print(f"alerts:             {alerts}")
    print(f"incidents:          {len(incidents)}")
    print(f"graded alerts:      {graded}")
    print(f"actioned alerts:    {actioned}")


def cmd_train(args) -> None:
    engine = _engine(args)
    report = engine.run_train_cycle(_source(args))
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))


def cmd_infer(args) -> None:
    engine = _engine(args)
    window_end = datetime.fromisoformat(args.end) if args.end else datetime.now(tz=timezone.utc)
    window_start = None
    if args.window:
        window_start = window_end - timedelta(minutes=args.window)
    report = engine.run_inference_batch(_source(args), window_end=window_end, window_start=window_start)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))


def cmd_backfill(args) -> None:
    engine = _engine(args)
    source = _source(args)
    now = datetime.fromisoformat(args.now) if args.now else None
    state = engine.backfill_state()
    for _ in range(args.steps):
        state = engine.run_backfill_step(source, now=now)
    print(json.dumps(state.to_json(), indent=2, sort_keys=True))


def cmd_eval(args) -> None:
    """Score the champion models against labeled telemetry and print reports."""
    engine = _engine(args)
    source = _source(args)
    out: dict = {}

    triage = engine.triage_champion()
    if triage is None:
        print("no triage champion to evaluate")
    else:
        model, encoder, pca_incident, _ = triage
        encoded = [encode_alert(encoder, a) for a in source.alerts()]
        incidents = [i for i in form_incidents(encoded) if i.grade is not None]
        if not incidents:
            print("telemetry has no graded incidents")
        else:
            Z = pca_mod.transform_matrix(pca_incident, incidents_to_matrix(encoder, incidents))
            scores = forest_mod.predict_scores(model, Z)
            predictions = np.asarray(model.classes)[np.argmax(scores, axis=1)]
            emitted = forest_mod.emitted_mask(model, scores)
            labels = [i.grade_tag for i in incidents]
            report = macro_scores(
                predictions.tolist(), labels,
                classes=sorted(set(model.classes) | set(labels)),
                coverage_value=coverage(emitted.tolist()))
            print("triage (graded incidents)")
            print(report.to_text_table())
            out["triage"] = report.to_json()

    remediation = engine.remediation_champion()
    if remediation is None:
        print("no remediation champion to evaluate")
    else:
        model, encoder, _, pca_alert = remediation
        encoded = [encode_alert(encoder, a) for a in source.alerts() if a.action is not None]
        if not encoded:
            print("telemetry has no actioned alerts")
        else:
            Z = pca_mod.transform_matrix(pca_alert, alerts_to_matrix(encoder, encoded))
            scores = forest_mod.predict_scores(model, Z)
            predictions = np.asarray(model.classes)[np.argmax(scores, axis=1)]
            emitted = forest_mod.emitted_mask(model, scores)
            labels = [a.action.value for a in encoded]
            report = macro_scores(
                predictions.tolist(), labels,
                classes=sorted(set(model.classes) | set(labels)),
                coverage_value=coverage(emitted.tolist()))
            print("remediation (actioned alerts)")
            print(report.to_text_table())
            out["remediation"] = report.to_json()

    if out:
        path = engine.data_dir / "eval_report.json"
        path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote {path}")


def cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    engine = _engine(args)
    source = CsvSource(args.telemetry) if args.telemetry else None
    console_dist = args.console_dist or os.environ.get("SOCDESK_CONSOLE_DIST")
    app = create_app(engine, source=source, console_dist=console_dist)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="socdesk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, telemetry=True):
        p.add_argument("--data-dir", help=f"engine data directory (or ${DATA_DIR_ENV})")
        p.add_argument("--config", help="pipeline config file (key = value)")
        if telemetry:
            p.add_argument("--telemetry", help="GUIDE-schema CSV telemetry")

    p = sub.add_parser("synth", help="generate synthetic GUIDE-schema telemetry")
    p.add_argument("--out", required=True)
    p.add_argument("--incidents", type=int, default=1000)
    p.add_argument("--orgs", type=int, default=25)
    p.add_argument("--detectors", type=int, default=120)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--start", help="window start (ISO timestamp)")
    p.add_argument("--window-days", type=int, default=14)
    p.add_argument("--ungraded-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate and summarize a telemetry file")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--limit", type=int, help="row cap")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one training cycle")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run one inference batch")
    common(p)
    p.add_argument("--window", type=int, help="window length in minutes (default from config)")
    p.add_argument("--end", help="window end (ISO timestamp, default now)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("backfill", help="run historical embedding backfill steps")
    common(p)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--now", help="anchor time for a cold start (ISO timestamp)")
    p.set_defaults(func=cmd_backfill)

    p = sub.add_parser("eval", help="evaluate champion models on labeled telemetry")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the HTTP/JSON API")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--console-dist", help="static console build to mount at /console")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PipelineError, ValueError) as exc:
        sys.exit(f"error: {exc}")


if __name__ == "__main__":
    main()
