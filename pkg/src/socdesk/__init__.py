"""socdesk: desk-scale guided response for security operation centers.

Triage, similar-incident, and remediation recommendations over GUIDE-schema
alert telemetry, with analyst feedback looping back as training labels.
"""

from .telemetry import (
    Action,
    AlertRecord,
    DatasetSplit,
    EntityKind,
    EvidenceRecord,
    Grade,
    IngestStats,
    SchemaError,
    ingest_guide_csv,
    load_split,
    save_split,
    stratified_split,
)
from .featurize import (
    EncodedAlert,
    EncoderModel,
    FeatureManifest,
    IncidentRecord,
    MANIFEST_V1,
    encode_alert,
    extract_numeric_features,
    fit_encoder,
    form_incidents,
    incident_hash,
    majority_grade,
    sample_incidents,
)
from .pca import Embedding, PcaModel, fit_pca, load_pca, save_pca, transform, transform_matrix
from .forest import (
    ForestModel,
    ForestParams,
    ModelRegistry,
    ValidationVerdict,
    calibrate_thresholds,
    default_grid,
    grid_search,
    load_forest,
    predict_labels,
    predict_scores,
    save_forest,
    train_forest,
)
from .simstore import EmbeddingEntry, EmbeddingStore, MatchKind, SimilarMatch, cosine_similarity, find_similar
from .metrics import EvalReport, coverage, macro_scores
from .pipeline import (
    CsvSource,
    Engine,
    ListSource,
    PipelineConfig,
    PipelineError,
    aggregate_remediation,
    identify_entity,
)

__version__ = "0.1.0"
