import json
import math

import numpy as np
import pytest

from socdesk.forest import (
    ForestModel,
    ForestParams,
    ModelRegistry,
    Tree,
    _sample_weights,
    calibrate_thresholds,
    default_grid,
    emitted_mask,
    expand_grid,
    grid_search,
    load_forest,
    predict_labels,
    predict_scores,
    save_forest,
    train_forest,
)


def two_blob_data(n=200, noise=0.3, seed=0, d=4):
    """Linearly separable two-class blobs; consistent labeling."""
    rng = np.random.default_rng(seed)
    half = n // 2
    Xa = rng.normal(loc=-2.0, scale=noise, size=(half, d))
    Xb = rng.normal(loc=2.0, scale=noise, size=(n - half, d))
    X = np.vstack([Xa, Xb])
    y = ["neg"] * half + ["pos"] * (n - half)
    return X, y


def three_class_data(n=300, seed=1, noise=0.6):
    rng = np.random.default_rng(seed)
    centers = {"TP": (3, 0), "FP": (-3, 0), "BP": (0, 3)}
    X, y = [], []
    for label, (cx, cy) in centers.items():
        pts = rng.normal(loc=(cx, cy), scale=noise, size=(n // 3, 2))
        X.append(pts)
        y += [label] * (n // 3)
    return np.vstack(X), y


def bucket_model(bucket_scores):
    """Single-tree model over feature 0 where bucket i (x == i) scores
    exactly bucket_scores[i] over classes ("A", "B")."""
    n = len(bucket_scores)
    size = 2 * n - 1
    feature = np.full(size, -1, dtype=np.int32)
    threshold = np.zeros(size, dtype=np.float64)
    left = np.full(size, -1, dtype=np.int32)
    right = np.full(size, -1, dtype=np.int32)
    counts = np.zeros((size, 2), dtype=np.float64)
    for i in range(n - 1):
        feature[i] = 0
        threshold[i] = i + 0.5
        left[i] = n - 1 + i
        right[i] = i + 1 if i + 1 <= n - 2 else 2 * n - 2
    for j, (sa, sb) in enumerate(bucket_scores):
        counts[n - 1 + j] = (sa, sb)
    if n == 1:
        counts[0] = bucket_scores[0]
    tree = Tree(feature=feature, threshold=threshold, left=left, right=right, counts=counts, depth=n - 1)
    return ForestModel(trees=[tree], classes=("A", "B"), params=ForestParams(n_estimators=1),
                       metrics={"input_dim": 1})


class TestTraining:
    def test_interpolation_regime_hits_perfect_train_accuracy(self):
        X, y = two_blob_data(n=120, noise=1.5)
        params = ForestParams(n_estimators=1, max_depth=None, min_samples_split=2, bootstrap=False, seed=5)
        model = train_forest(X, y, params)
        assert (predict_labels(model, X) == np.asarray(y)).mean() == 1.0

    def test_single_class_errors(self):
        X = np.random.default_rng(0).normal(size=(20, 3))
        with pytest.raises(ValueError):
            train_forest(X, ["same"] * 20, ForestParams(n_estimators=2))

    def test_balanced_class_weights(self):
        # weight(c) = n / (k * n_c): 90/10 data weights the minority x9.
        codes = np.asarray([0] * 90 + [1] * 10)
        weights = _sample_weights(codes, 2, "balanced")
        assert weights[0] == pytest.approx(100 / (2 * 90))
        assert weights[-1] == pytest.approx(100 / (2 * 10))
        assert weights[-1] / weights[0] == pytest.approx(9.0)

    def test_tree_count_and_depth_caps(self):
        X, y = two_blob_data(n=150, noise=2.5)
        params = ForestParams(n_estimators=7, max_depth=3, seed=1)
        model = train_forest(X, y, params)
        assert len(model.trees) == 7
        assert all(tree.depth <= 3 for tree in model.trees)

    def test_seeded_determinism_bit_exact(self):
        X, y = two_blob_data(n=200, noise=2.0, seed=3)
        probes = np.random.default_rng(9).normal(size=(64, 4))
        params = ForestParams(n_estimators=5, max_depth=8, seed=77)
        a = predict_scores(train_forest(X, y, params), probes)
        b = predict_scores(train_forest(X, y, params), probes)
        assert a.tobytes() == b.tobytes()

    def test_row_shuffle_with_identities_leaves_trees_unchanged(self):
        X, y = two_blob_data(n=100, noise=1.0, seed=4)
        ids = np.asarray([f"row{i:04d}" for i in range(len(y))])
        params = ForestParams(n_estimators=3, max_depth=6, seed=11)
        base = train_forest(X, y, params, row_ids=ids)

        perm = np.random.default_rng(1).permutation(len(y))
        shuffled = train_forest(X[perm], [y[i] for i in perm], params, row_ids=ids[perm])
        for t1, t2 in zip(base.trees, shuffled.trees):
            assert t1.feature.tobytes() == t2.feature.tobytes()
            assert t1.threshold.tobytes() == t2.threshold.tobytes()
            assert t1.counts.tobytes() == t2.counts.tobytes()

    def test_dimension_mismatch(self):
        X, y = two_blob_data(n=60)
        model = train_forest(X, y, ForestParams(n_estimators=1, seed=0))
        with pytest.raises(ValueError, match="dimension"):
            predict_scores(model, np.zeros((2, 9)))


class TestScores:
    def test_unanimous_trees_score_one(self):
        model = bucket_model([(3.0, 0.0)])
        model.trees.append(model.trees[0])
        scores = predict_scores(model, np.asarray([[0.0]]))
        assert scores[0, 0] == 1.0

    def test_two_trees_split_vote(self):
        # One tree votes A, the other votes B: 0.5 each.
        a = bucket_model([(1.0, 0.0)])
        b = bucket_model([(0.0, 1.0)])
        model = ForestModel(trees=[a.trees[0], b.trees[0]], classes=("A", "B"),
                            params=ForestParams(n_estimators=2), metrics={"input_dim": 1})
        scores = predict_scores(model, np.asarray([[0.0]]))
        np.testing.assert_allclose(scores[0], [0.5, 0.5])

    def test_simplex_property(self):
        X, y = three_class_data()
        model = train_forest(X, y, ForestParams(n_estimators=10, max_depth=6, seed=2))
        probes = np.random.default_rng(0).normal(scale=4, size=(500, 2))
        scores = predict_scores(model, probes)
        assert (scores >= 0).all()
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)


class TestCalibration:
    def test_crafted_sweep_finds_smallest_threshold(self):
        # Winning scores for class A, ascending: one wrong at 0.55, then ten
        # where nine are right. Precision first reaches 0.9 at 0.60.
        scores = [0.55] + [0.60 + 0.02 * i for i in range(10)]
        wrong_positions = {0, 4}  # 0.55 and 0.68 are mislabeled
        buckets = [(s, 1.0 - s) for s in scores]
        model = bucket_model(buckets)
        X = np.asarray([[float(i)] for i in range(len(scores))])
        y = ["B" if i in wrong_positions else "A" for i in range(len(scores))]

        # Brute-force oracle over candidate thresholds.
        winning = np.asarray(scores)
        labels = np.asarray(y)
        best = None
        for t in sorted(set(scores)):
            emitted = winning >= t
            precision = (labels[emitted] == "A").mean()
            if precision >= 0.9:
                best = t
                break
        assert best == pytest.approx(0.60)

        thresholds = calibrate_thresholds(model, X, y, target_precision=0.9)
        assert thresholds["A"] == pytest.approx(best)
        assert math.isinf(thresholds["B"])  # class B never wins a prediction

    def test_perfect_classifier_threshold_is_min_winning_score(self):
        X, y = two_blob_data(n=80, noise=0.2, seed=6)
        model = train_forest(X, y, ForestParams(n_estimators=5, seed=3))
        scores = predict_scores(model, X)
        winners = np.argmax(scores, axis=1)
        winning = scores[np.arange(len(X)), winners]
        thresholds = calibrate_thresholds(model, X, y, target_precision=0.9)
        for j, c in enumerate(model.classes):
            assert thresholds[c] == pytest.approx(winning[winners == j].min())

    def test_soundness_by_construction(self):
        X, y = three_class_data(n=400, noise=2.0, seed=7)
        model = train_forest(X, y, ForestParams(n_estimators=8, max_depth=6, seed=1))
        target = 0.85
        thresholds = calibrate_thresholds(model, X, y, target_precision=target)
        model.thresholds = thresholds
        scores = predict_scores(model, X)
        winners = np.argmax(scores, axis=1)
        emitted = emitted_mask(model, scores)
        labels = np.asarray(y)
        for j, c in enumerate(model.classes):
            mask = emitted & (winners == j)
            if mask.any():
                assert (labels[mask] == c).mean() >= target

    def test_monotone_coverage(self):
        X, y = three_class_data(n=300, noise=2.5, seed=8)
        model = train_forest(X, y, ForestParams(n_estimators=6, max_depth=5, seed=4))
        scores = predict_scores(model, X)
        fractions = []
        for target in (0.5, 0.7, 0.9, 0.99):
            model.thresholds = calibrate_thresholds(model, X, y, target_precision=target)
            fractions.append(emitted_mask(model, scores).mean())
        assert fractions == sorted(fractions, reverse=True)

    def test_preconditions(self):
        model = bucket_model([(0.9, 0.1)])
        with pytest.raises(ValueError):
            calibrate_thresholds(model, np.zeros((0, 1)), [])
        with pytest.raises(ValueError, match="missing"):
            calibrate_thresholds(model, np.zeros((2, 1)), ["A", "A"])


class TestGridSearch:
    def test_default_lattice_has_96_points(self):
        assert len(default_grid()) == 4 * 4 * 3 * 2

    def test_singleton_grid_returns_that_config(self):
        X, y = two_blob_data(n=60, noise=1.0)
        grid = expand_grid({"n_estimators": [3], "max_depth": [4], "min_samples_split": [2], "class_weight": [None]})
        result = grid_search((X, y), (X, y), grid)
        assert result.best.params.n_estimators == 3
        assert result.best.params.max_depth == 4

    def test_separable_toy_reaches_perfect_f1(self):
        X, y = two_blob_data(n=100, noise=0.2, seed=10)
        Xv, yv = two_blob_data(n=40, noise=0.2, seed=11)
        grid = expand_grid({"n_estimators": [2, 4], "max_depth": [4], "min_samples_split": [2], "class_weight": [None, "balanced"]})
        result = grid_search((X, y), (Xv, yv), grid)
        assert result.best_macro_f1 == pytest.approx(1.0)

    def test_tie_breaks_prefer_smaller_models(self):
        X, y = two_blob_data(n=100, noise=0.2, seed=12)
        grid = expand_grid({"n_estimators": [8, 2], "max_depth": [10, 2], "min_samples_split": [2], "class_weight": [None]})
        result = grid_search((X, y), (X, y), grid)
        assert result.best_macro_f1 == pytest.approx(1.0)
        assert result.best.params.n_estimators == 2
        assert result.best.params.max_depth == 2

    def test_all_points_failing_raises(self):
        X = np.random.default_rng(0).normal(size=(20, 3))
        y = ["one"] * 20  # single class: every training attempt fails
        grid = [ForestParams(n_estimators=1), ForestParams(n_estimators=2)]
        with pytest.raises(RuntimeError, match="every grid point failed"):
            grid_search((X, y), (X, y), grid)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            grid_search((np.zeros((4, 2)), ["a", "b", "a", "b"]), (np.zeros((2, 2)), ["a", "b"]), [])


class TestBundles:
    def test_save_load_predictions_bit_exact(self, tmp_path):
        X, y = three_class_data(n=150, seed=13)
        model = train_forest(X, y, ForestParams(n_estimators=4, max_depth=7, seed=21))
        model.thresholds = {"TP": 0.7, "FP": math.inf, "BP": 0.55}
        model.metrics["macro_f1"] = 0.9
        save_forest(model, tmp_path / "bundle")
        loaded = load_forest(tmp_path / "bundle")
        probes = np.random.default_rng(2).normal(size=(200, 2))
        assert predict_scores(loaded, probes).tobytes() == predict_scores(model, probes).tobytes()
        assert loaded.thresholds == model.thresholds
        assert loaded.params == model.params

    def test_bundle_bytes_deterministic(self, tmp_path):
        X, y = two_blob_data(n=80, seed=14)
        for name in ("a", "b"):
            model = train_forest(X, y, ForestParams(n_estimators=3, seed=5))
            model.metrics["macro_f1"] = 0.5
            save_forest(model, tmp_path / name)
        assert (tmp_path / "a" / "trees.bin").read_bytes() == (tmp_path / "b" / "trees.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


class TestRegistry:
    def _model(self, f1, seed=0):
        X, y = two_blob_data(n=60, noise=1.0, seed=seed)
        model = train_forest(X, y, ForestParams(n_estimators=2, seed=seed))
        model.metrics["macro_f1"] = f1
        return model

    def test_cold_start_accepts(self, tmp_path):
        registry = ModelRegistry(tmp_path / "reg")
        verdict = registry.validate_and_store(self._model(0.8))
        assert verdict.accepted and verdict.old_macro_f1 is None
        assert registry.champion_version() == 1

    def test_regression_beyond_tolerance_rejected(self, tmp_path):
        registry = ModelRegistry(tmp_path / "reg")
        registry.validate_and_store(self._model(0.90))
        verdict = registry.validate_and_store(self._model(0.80), tolerance=0.03)
        assert not verdict.accepted
        assert registry.champion_version() == 1  # champion unchanged
        assert (tmp_path / "reg" / "rejected" / "r0001" / "manifest.json").exists()

    def test_small_regression_within_tolerance_accepted(self, tmp_path):
        # A challenger does not have to beat the champion outright.
        registry = ModelRegistry(tmp_path / "reg")
        registry.validate_and_store(self._model(0.90))
        verdict = registry.validate_and_store(self._model(0.88), tolerance=0.03)
        assert verdict.accepted
        assert registry.champion_version() == 2

    def test_versions_monotonic(self, tmp_path):
        registry = ModelRegistry(tmp_path / "reg")
        for i, f1 in enumerate((0.7, 0.75, 0.74)):
            registry.validate_and_store(self._model(f1, seed=i))
        assert registry.versions() == [1, 2, 3]
        champion = registry.champion()
        assert champion.version == 3
        assert champion.parent_version == 2

    def test_manifest_carries_verdict_and_extras(self, tmp_path):
        registry = ModelRegistry(tmp_path / "reg")
        registry.validate_and_store(self._model(0.8), extra_manifest={"artifacts": {"cycle": "cycle0001"}})
        manifest = registry.champion_manifest()
        assert manifest["accepted"] is True
        assert manifest["artifacts"]["cycle"] == "cycle0001"
        assert manifest["verdict"]["new_macro_f1"] == 0.8
