"""Walkthrough: PCA embeddings and similar-incident retrieval.

Fits the reducer on incident feature vectors, stores embeddings in the
per-organization store, and runs the three-step matcher: exact hash with the
same grade, exact hash with a different grade, then cosine neighbors.
"""

import tempfile
from datetime import timedelta
from pathlib import Path

import numpy as np

from socdesk import (
    EmbeddingEntry,
    EmbeddingStore,
    encode_alert,
    find_similar,
    fit_encoder,
    fit_pca,
    form_incidents,
    transform_matrix,
)
from socdesk.featurize import incidents_to_matrix
from socdesk.synthetic import SynthConfig, generate_alerts

alerts = generate_alerts(SynthConfig(n_incidents=800, n_orgs=4, n_detectors=12, seed=11))
encoder = fit_encoder(alerts, min_cardinality=10)
incidents = form_incidents([encode_alert(encoder, a) for a in alerts])

print("== 1. reduce incident vectors to k components ==")
X = incidents_to_matrix(encoder, incidents)
reducer = fit_pca(X, k=40, variance_target=0.95)
Z = transform_matrix(reducer, X)
print(f"input dim {X.shape[1]} -> k={reducer.k}, "
      f"captured variance {reducer.captured_variance():.3f}")

print("\n== 2. store embeddings, capped at 5 per (org, hash, grade) ==")
store = EmbeddingStore(Path(tempfile.mkdtemp()) / "emb", k=reducer.k)
entries = [
    EmbeddingEntry(
        org_id=i.org_id, incident_id=i.incident_id, incident_hash=i.incident_hash,
        grade_tag=i.grade_tag, embedding=Z[n], timestamp=i.latest_timestamp)
    for n, i in enumerate(incidents)
]
accepted = store.upsert(entries, cap=5)
print(f"upserted {accepted} embeddings; store retains {len(store)} after per-key caps")

print("\n== 3. three-step matching for one incident ==")
query_index = 17
query = incidents[query_index]
matches = find_similar(
    store,
    org_id=query.org_id,
    incident_hash=query.incident_hash,
    query=Z[query_index],
    grade_rec=query.grade_tag,
    k_max=5,
    cutoff=0.9,
    horizon=timedelta(days=180),
    now=query.latest_timestamp,
    exclude_incident_id=query.incident_id,
)
print(f"query {query.incident_id} (grade {query.grade_tag}, "
      f"hash {query.incident_hash[:12]}...):")
for m in matches:
    print(f"  {m.kind.value:24s} {m.incident_id}  score={m.score:.3f}  {m.timestamp:%Y-%m-%d}")

print("\n== 4. pruning old history ==")
removed = store.prune_history(horizon=timedelta(days=180), now=query.latest_timestamp + timedelta(days=200))
print(f"after jumping 200 days ahead, prune removed {removed} stale embeddings; "
      f"{len(store)} remain")
