"""Random forest training, calibration, and the versioned model registry.

Trees are canonical CART classifiers: Gini impurity, midpoint thresholds,
sqrt(d) features considered per split, bootstrap sampling with replacement.
Everything is seeded and order-independent: rows are identity-sorted before
sampling, so shuffling the training set never changes a tree. A model carries
its per-class score thresholds (swept on a validation split against a target
precision) and its validation metrics; the registry accepts a challenger only
when its macro-F1 is within tolerance of the reigning champion's.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import macro_scores

FOREST_FORMAT_MAGIC = b"SDRF"
FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    class_weight: Optional[str] = None  # None | "balanced"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.class_weight not in (None, "balanced"):
            raise ValueError(f"unsupported class_weight {self.class_weight!r}")

    def to_json(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "class_weight": self.class_weight,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ForestParams":
        return cls(
            n_estimators=int(doc["n_estimators"]),
            max_depth=None if doc["max_depth"] is None else int(doc["max_depth"]),
            min_samples_split=int(doc["min_samples_split"]),
            class_weight=doc["class_weight"],
            bootstrap=bool(doc.get("bootstrap", True)),
            seed=int(doc["seed"]),
        )


@dataclass
class Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    counts: np.ndarray     # float64 (n_nodes, n_classes), class-count distributions
    depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class ForestModel:
    trees: list[Tree]
    classes: tuple[str, ...]
    params: ForestParams
    thresholds: Optional[dict[str, float]] = None  # math.inf means "never emit"
    metrics: dict = field(default_factory=dict)
    version: Optional[int] = None
    parent_version: Optional[int] = None

    @property
    def input_dim(self) -> int:
        # Leaf-only trees carry no feature index; fall back to the recorded dim.
        return self.metrics.get("input_dim", int(max((t.feature.max(initial=-1) for t in self.trees), default=-1)) + 1)


def _class_codes(y: Sequence, classes: Optional[Sequence[str]] = None) -> tuple[np.ndarray, tuple[str, ...]]:
    labels = np.asarray([str(v) for v in y])
    if classes is None:
        classes = tuple(sorted(set(labels)))
    else:
        classes = tuple(str(c) for c in classes)
    index = {c: i for i, c in enumerate(classes)}
    try:
        codes = np.asarray([index[v] for v in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} outside class set {classes}") from exc
    return codes, classes


def _sample_weights(codes: np.ndarray, n_classes: int, class_weight: Optional[str]) -> np.ndarray:
    if class_weight is None:
        return np.ones(len(codes), dtype=np.float64)
    # balanced: weight(c) = n / (k * n_c)
    counts = np.bincount(codes, minlength=n_classes).astype(np.float64)
    weights = len(codes) / (n_classes * np.maximum(counts, 1.0))
    return weights[codes]


def _build_tree(
    X: np.ndarray,
    codes: np.ndarray,
    weights: np.ndarray,
    n_classes: int,
    params: ForestParams,
    rng: np.random.Generator,
) -> Tree:
    n, d = X.shape
    n_features = max(1, int(np.sqrt(d)))
    W = np.zeros((n, n_classes), dtype=np.float64)
    W[np.arange(n), codes] = weights

    if params.bootstrap:
        sample = rng.integers(0, n, size=n)
    else:
        sample = np.arange(n)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[np.ndarray] = []
    tree_depth = 0

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(None)  # type: ignore[arg-type]
        return len(feature) - 1

    root = new_node()
    stack: list[tuple[int, np.ndarray, int]] = [(root, sample, 0)]

    while stack:
        node, idx, depth = stack.pop()
        tree_depth = max(tree_depth, depth)
        counts[node] = W[idx].sum(axis=0)

        class_hits = np.bincount(codes[idx], minlength=n_classes)
        is_pure = int(np.count_nonzero(class_hits)) <= 1
        at_depth = params.max_depth is not None and depth >= params.max_depth
        if is_pure or at_depth or len(idx) < params.min_samples_split:
            continue

        best_gain = -np.inf
        best_feature = -1
        best_threshold = 0.0
        evaluated = 0
        for f in rng.permutation(d):
            v = X[idx, f]
            order = np.argsort(v, kind="stable")
            vs = v[order]
            if vs[0] == vs[-1]:
                continue  # constant feature here, does not count toward the budget
            cum = np.cumsum(W[idx[order]], axis=0)
            cuts = np.nonzero(vs[:-1] != vs[1:])[0]
            left_counts = cum[cuts]
            total = cum[-1]
            right_counts = total - left_counts
            left_tot = left_counts.sum(axis=1)
            right_tot = right_counts.sum(axis=1)
            # Minimizing weighted Gini equals maximizing sum(c^2)/total per side.
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = (
                    np.where(left_tot > 0, (left_counts ** 2).sum(axis=1) / left_tot, 0.0)
                    + np.where(right_tot > 0, (right_counts ** 2).sum(axis=1) / right_tot, 0.0)
                )
            b = int(np.argmax(gain))
            t = 0.5 * (vs[cuts[b]] + vs[cuts[b] + 1])
            g = float(gain[b])
            if g > best_gain or (g == best_gain and (f < best_feature or (f == best_feature and t < best_threshold))):
                best_gain, best_feature, best_threshold = g, int(f), float(t)
            evaluated += 1
            if evaluated >= n_features:
                break

        if best_feature < 0:
            continue  # nothing splits; stay a leaf

        mask = X[idx, best_feature] <= best_threshold
        left_idx = idx[mask]
        right_idx = idx[~mask]
        if len(left_idx) == 0 or len(right_idx) == 0:
            continue

        feature[node] = best_feature
        threshold[node] = best_threshold
        left_child = new_node()
        right_child = new_node()
        left[node] = left_child
        right[node] = right_child
        # Right pushed first so the left branch is processed next (stable order).
        stack.append((right_child, right_idx, depth + 1))
        stack.append((left_child, left_idx, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        counts=np.asarray(counts, dtype=np.float64),
        depth=tree_depth,
    )


def train_forest(
    X: np.ndarray,
    y: Sequence,
    params: ForestParams,
    row_ids: Optional[Sequence] = None,
    classes: Optional[Sequence[str]] = None,
) -> ForestModel:
    """Train a seeded forest on (n, d) features and class labels.

    `row_ids` gives rows a stable identity: samples are sorted by identity
    before bootstrap draws, so the same rows in any order produce the same
    trees. Without ids, position is the identity.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-dimensional")
    codes, class_list = _class_codes(y, classes)
    if len(codes) != X.shape[0]:
        raise ValueError(f"length mismatch: {X.shape[0]} rows vs {len(codes)} labels")
    if len(set(codes.tolist())) < 2:
        raise ValueError("training needs at least 2 classes present")
    if X.shape[0] < params.min_samples_split:
        raise ValueError(f"need at least min_samples_split={params.min_samples_split} samples")

    if row_ids is not None:
        order = np.argsort(np.asarray(row_ids), kind="stable")
        X = X[order]
        codes = codes[order]

    weights = _sample_weights(codes, len(class_list), params.class_weight)
    trees = []
    for t in range(params.n_estimators):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.seed, t])))
        trees.append(_build_tree(X, codes, weights, len(class_list), params, rng))

    return ForestModel(
        trees=trees,
        classes=class_list,
        params=params,
        metrics={"input_dim": X.shape[1]},
    )


def predict_scores(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean of per-tree leaf class distributions; each row sums to 1."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"dimension mismatch: rows have {X.shape[1]}, model expects {model.input_dim}")
    n = X.shape[0]
    total = np.zeros((n, len(model.classes)), dtype=np.float64)
    rows = np.arange(n)
    for tree in model.trees:
        node = np.zeros(n, dtype=np.int32)
        while True:
            f = tree.feature[node]
            active = f >= 0
            if not active.any():
                break
            sel = node[active]
            go_left = X[rows[active], f[active]] <= tree.threshold[sel]
            node[active] = np.where(go_left, tree.left[sel], tree.right[sel])
        leaf_counts = tree.counts[node]
        total += leaf_counts / leaf_counts.sum(axis=1, keepdims=True)
    return total / len(model.trees)


def predict_labels(model: ForestModel, X: np.ndarray) -> np.ndarray:
    scores = predict_scores(model, X)
    return np.asarray(model.classes)[np.argmax(scores, axis=1)]


def emitted_mask(model: ForestModel, scores: np.ndarray) -> np.ndarray:
    """True where the winning score clears its class threshold."""
    if model.thresholds is None:
        raise ValueError("model has no calibrated thresholds")
    winners = np.argmax(scores, axis=1)
    winning = scores[np.arange(len(scores)), winners]
    cutoffs = np.asarray([model.thresholds.get(c, math.inf) for c in model.classes])
    return winning >= cutoffs[winners]


def calibrate_thresholds(
    model: ForestModel,
    X_val: np.ndarray,
    y_val: Sequence,
    target_precision: float = 0.9,
) -> dict[str, float]:
    """Per-class minimum score cutoffs achieving the target precision.

    For each class, sweep the observed winning scores ascending and keep the
    smallest cutoff whose emitted predictions reach the target precision on
    this set. An unachievable class gets math.inf (never emit).
    """
    labels = np.asarray([str(v) for v in y_val])
    if len(labels) == 0:
        raise ValueError("calibration set must be non-empty")
    for c in model.classes:
        if c not in labels:
            raise ValueError(f"class {c!r} missing from calibration labels")
    scores = predict_scores(model, X_val)
    winners = np.argmax(scores, axis=1)
    winning = scores[np.arange(len(scores)), winners]

    thresholds: dict[str, float] = {}
    for j, c in enumerate(model.classes):
        mask = winners == j
        if not mask.any():
            thresholds[c] = math.inf
            continue
        s = winning[mask]
        correct = (labels[mask] == c).astype(np.float64)
        order = np.argsort(s, kind="stable")
        s, correct = s[order], correct[order]
        # Suffix sums: precision of "emit at score >= s[i]" for each i.
        emitted = np.arange(len(s), 0, -1, dtype=np.float64)
        hits = np.cumsum(correct[::-1])[::-1]
        precision = hits / emitted
        # First position of each distinct score value.
        first = np.nonzero(np.r_[True, s[1:] != s[:-1]])[0]
        ok = first[precision[first] >= target_precision]
        thresholds[c] = float(s[ok[0]]) if ok.size else math.inf
    return thresholds


@dataclass(frozen=True)
class GridPointResult:
    params: ForestParams
    macro_f1: Optional[float]
    error: Optional[str] = None


@dataclass
class GridSearchResult:
    best: ForestModel
    best_macro_f1: float
    points: list[GridPointResult]


def expand_grid(lattice: dict) -> list[ForestParams]:
    """Expand {param: [values]} into ForestParams, lexicographic point order."""
    keys = ("n_estimators", "max_depth", "min_samples_split", "class_weight")
    lists = [list(lattice.get(k, [getattr(ForestParams(), k)])) for k in keys]
    points = []
    for ne in lists[0]:
        for md in lists[1]:
            for ms in lists[2]:
                for cw in lists[3]:
                    points.append(ForestParams(
                        n_estimators=ne, max_depth=md, min_samples_split=ms,
                        class_weight=cw, seed=int(lattice.get("seed", 0)),
                    ))
    return points


def default_grid(seed: int = 0) -> list[ForestParams]:
    """The full production lattice: 4 x 4 x 3 x 2 = 96 configurations."""
    return expand_grid({
        "n_estimators": [100, 200, 300, 400],
        "max_depth": [30, 50, 75, 100],
        "min_samples_split": [5, 10, 15],
        "class_weight": ["balanced", None],
        "seed": seed,
    })


def _fit_and_score(args) -> tuple[int, Optional[float], Optional[str]]:
    index, X, y, Xv, yv, params, classes = args
    try:
        model = train_forest(X, y, params, classes=classes)
        preds = predict_labels(model, Xv)
        val_labels = [str(v) for v in yv]
        scoring_classes = sorted(set(model.classes) | set(val_labels))
        f1 = macro_scores(preds.tolist(), val_labels, classes=scoring_classes).macro_f1
        return index, f1, None
    except Exception as exc:  # propagated per point; search fails only if all do
        return index, None, f"{type(exc).__name__}: {exc}"


def grid_search(
    train: tuple[np.ndarray, Sequence],
    val: tuple[np.ndarray, Sequence],
    grid: Sequence[ForestParams],
    n_jobs: int = 1,
) -> GridSearchResult:
    """Train every lattice point and return the best validation macro-F1.

    Each point trains with a derived seed (point seed XOR point index), so
    results do not depend on scheduling. Ties break toward fewer trees, then
    smaller depth, then lexicographic remaining parameters.
    """
    if not grid:
        raise ValueError("grid must be non-empty")
    X, y = train
    Xv, yv = val
    classes = tuple(sorted({str(v) for v in y}))
    jobs = [
        (i, X, y, Xv, yv, replace(p, seed=p.seed ^ i), classes)
        for i, p in enumerate(grid)
    ]

    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            raw = list(pool.map(_fit_and_score, jobs))
    else:
        raw = [_fit_and_score(job) for job in jobs]

    points = [GridPointResult(params=jobs[i][5], macro_f1=f1, error=err) for i, f1, err in raw]
    scored = [(p, r) for p, r in zip(points, raw) if r[1] is not None]
    if not scored:
        failures = "; ".join(p.error or "?" for p in points)
        raise RuntimeError(f"every grid point failed: {failures}")

    def sort_key(item):
        point, _ = item
        p = point.params
        return (
            -point.macro_f1,
            p.n_estimators,
            p.max_depth if p.max_depth is not None else math.inf,
            p.min_samples_split,
            p.class_weight or "",
        )

    best_point, best_raw = min(scored, key=sort_key)
    # Retrain the winner (cheap relative to the search, keeps workers stateless).
    best_model = train_forest(X, y, best_point.params, classes=classes)
    best_model.metrics["grid_macro_f1"] = best_raw[1]
    return GridSearchResult(best=best_model, best_macro_f1=float(best_raw[1]), points=points)


# ---------------------------------------------------------------------------
# Bundle serialization and the champion/challenger registry.
# ---------------------------------------------------------------------------

def _trees_to_bytes(model: ForestModel) -> bytes:
    chunks = [struct.pack("<4sHI", FOREST_FORMAT_MAGIC, FOREST_FORMAT_VERSION, len(model.classes))]
    for c in model.classes:
        raw = c.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
    chunks.append(struct.pack("<I", len(model.trees)))
    for tree in model.trees:
        chunks.append(struct.pack("<II", tree.n_nodes, tree.depth))
        chunks.append(np.ascontiguousarray(tree.feature, dtype="<i4").tobytes())
        chunks.append(np.ascontiguousarray(tree.threshold, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(tree.left, dtype="<i4").tobytes())
        chunks.append(np.ascontiguousarray(tree.right, dtype="<i4").tobytes())
        chunks.append(np.ascontiguousarray(tree.counts, dtype="<f8").tobytes())
    return b"".join(chunks)


def _trees_from_bytes(raw: bytes) -> tuple[list[Tree], tuple[str, ...]]:
    magic, fmt, n_classes = struct.unpack_from("<4sHI", raw, 0)
    if magic != FOREST_FORMAT_MAGIC or fmt != FOREST_FORMAT_VERSION:
        raise ValueError("not a forest tree dump")
    offset = struct.calcsize("<4sHI")
    classes = []
    for _ in range(n_classes):
        (length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        classes.append(raw[offset:offset + length].decode("utf-8"))
        offset += length
    (n_trees,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    trees = []
    for _ in range(n_trees):
        n_nodes, depth = struct.unpack_from("<II", raw, offset)
        offset += 8
        feature = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=offset).copy()
        offset += 4 * n_nodes
        threshold = np.frombuffer(raw, dtype="<f8", count=n_nodes, offset=offset).copy()
        offset += 8 * n_nodes
        left = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=offset).copy()
        offset += 4 * n_nodes
        right = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=offset).copy()
        offset += 4 * n_nodes
        counts = np.frombuffer(raw, dtype="<f8", count=n_nodes * n_classes, offset=offset).reshape(n_nodes, n_classes).copy()
        offset += 8 * n_nodes * n_classes
        trees.append(Tree(feature=feature, threshold=threshold, left=left, right=right, counts=counts, depth=depth))
    return trees, tuple(classes)


def save_forest(model: ForestModel, bundle_dir: str | Path) -> None:
    """Write a bundle directory: manifest.json + trees.bin. Deterministic bytes."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    thresholds = None
    if model.thresholds is not None:
        thresholds = {c: (None if math.isinf(t) else t) for c, t in model.thresholds.items()}
    manifest = {
        "format": "forest-bundle-v1",
        "classes": list(model.classes),
        "params": model.params.to_json(),
        "thresholds": thresholds,
        "metrics": model.metrics,
        "version": model.version,
        "parent_version": model.parent_version,
        "score_semantics": "mean per-tree leaf vote fraction",
    }
    (bundle_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (bundle_dir / "trees.bin").write_bytes(_trees_to_bytes(model))


def load_forest(bundle_dir: str | Path) -> ForestModel:
    bundle_dir = Path(bundle_dir)
    manifest = json.loads((bundle_dir / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != "forest-bundle-v1":
        raise ValueError(f"unsupported bundle format in {bundle_dir}")
    trees, classes = _trees_from_bytes((bundle_dir / "trees.bin").read_bytes())
    thresholds = manifest["thresholds"]
    if thresholds is not None:
        thresholds = {c: (math.inf if t is None else float(t)) for c, t in thresholds.items()}
    return ForestModel(
        trees=trees,
        classes=classes,
        params=ForestParams.from_json(manifest["params"]),
        thresholds=thresholds,
        metrics=manifest.get("metrics", {}),
        version=manifest.get("version"),
        parent_version=manifest.get("parent_version"),
    )


@dataclass(frozen=True)
class ValidationVerdict:
    accepted: bool
    new_macro_f1: float
    old_macro_f1: Optional[float]
    tolerance: float

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "new_macro_f1": self.new_macro_f1,
            "old_macro_f1": self.old_macro_f1,
            "tolerance": self.tolerance,
        }


class ModelRegistry:
    """Versioned forest bundles with champion/challenger acceptance.

    Accepted bundles live under v<NNNN> with monotonically increasing
    versions; rejected challengers are archived under rejected/ with their
    verdict, and the previous champion stays live.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def versions(self) -> list[int]:
        out = []
        for entry in self.root.iterdir():
            if entry.is_dir() and entry.name.startswith("v") and entry.name[1:].isdigit():
                out.append(int(entry.name[1:]))
        return sorted(out)

    def champion_version(self) -> Optional[int]:
        versions = self.versions()
        return versions[-1] if versions else None

    def champion(self) -> Optional[ForestModel]:
        version = self.champion_version()
        if version is None:
            return None
        return load_forest(self.root / f"v{version:04d}")

    def bundle_dir(self, version: int) -> Path:
        return self.root / f"v{version:04d}"

    def validate_and_store(
        self,
        model: ForestModel,
        tolerance: float = 0.03,
        extra_manifest: Optional[dict] = None,
    ) -> ValidationVerdict:
        """Compare the challenger against the champion and store the outcome.

        Acceptance requires new macro-F1 >= old macro-F1 - tolerance; a cold
        registry accepts unconditionally. Writes go to a temp directory and
        land with an atomic rename, so an I/O failure leaves the champion
        untouched.
        """
        new_f1 = float(model.metrics.get("macro_f1", float("nan")))
        if math.isnan(new_f1):
            raise ValueError("model.metrics must carry 'macro_f1' before registration")
        champion_version = self.champion_version()
        old_f1 = None
        if champion_version is not None:
            old_manifest = json.loads((self.bundle_dir(champion_version) / "manifest.json").read_text(encoding="utf-8"))
            old_f1 = float(old_manifest["metrics"]["macro_f1"])
        accepted = old_f1 is None or new_f1 >= old_f1 - tolerance
        verdict = ValidationVerdict(accepted=accepted, new_macro_f1=new_f1, old_macro_f1=old_f1, tolerance=tolerance)

        if accepted:
            version = (champion_version or 0) + 1
            model.version = version
            model.parent_version = champion_version
            target = self.bundle_dir(version)
        else:
            archive = self.root / "rejected"
            archive.mkdir(exist_ok=True)
            index = 1 + sum(1 for p in archive.iterdir() if p.is_dir())
            model.version = None
            model.parent_version = champion_version
            target = archive / f"r{index:04d}"

        staging = target.with_name(target.name + ".tmp")
        if staging.exists():
            shutil.rmtree(staging)
        save_forest(model, staging)
        manifest_path = staging / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["accepted"] = accepted
        manifest["verdict"] = verdict.to_json()
        if extra_manifest:
            manifest.update(extra_manifest)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(staging, target)
        return verdict

    def champion_manifest(self) -> Optional[dict]:
        version = self.champion_version()
        if version is None:
            return None
        return json.loads((self.bundle_dir(version) / "manifest.json").read_text(encoding="utf-8"))
