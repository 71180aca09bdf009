"""Walkthrough: forest training, grid search, precision thresholds, registry.

Trains triage forests over a small grid, calibrates per-class score cutoffs
to a 0.9 precision target, and shows champion/challenger acceptance.
"""

import tempfile
from pathlib import Path

import numpy as np

from socdesk import (
    ForestParams,
    ModelRegistry,
    calibrate_thresholds,
    grid_search,
    predict_scores,
)
from socdesk.forest import emitted_mask, expand_grid
from socdesk.metrics import coverage, macro_scores

rng = np.random.default_rng(5)


def make_split(n, noise):
    centers = {"TP": (4, 0), "FP": (-4, 0), "BP": (0, 4)}
    X, y = [], []
    for label, center in centers.items():
        X.append(rng.normal(loc=center, scale=noise, size=(n // 3, 2)))
        y += [label] * (n // 3)
    return np.vstack(X), y


X_train, y_train = make_split(600, noise=2.0)
X_val, y_val = make_split(300, noise=2.0)
X_test, y_test = make_split(300, noise=2.0)

print("== 1. grid search on validation macro-F1 ==")
grid = expand_grid({
    "n_estimators": [10, 30],
    "max_depth": [6, 12],
    "min_samples_split": [5],
    "class_weight": ["balanced", None],
    "seed": 3,
})
result = grid_search((X_train, y_train), (X_val, y_val), grid)
print(f"searched {len(result.points)} configurations; "
      f"best validation macro-F1 {result.best_macro_f1:.3f}")
print(f"winner: {result.best.params.to_json()}")

print("\n== 2. calibrate per-class thresholds to 0.9 precision ==")
model = result.best
model.thresholds = calibrate_thresholds(model, X_val, y_val, target_precision=0.9)
for c, t in sorted(model.thresholds.items()):
    shown = "never emit" if t == float("inf") else f"{t:.3f}"
    print(f"  {c}: emit at score >= {shown}")

scores = predict_scores(model, X_test)
emitted = emitted_mask(model, scores)
predictions = np.asarray(model.classes)[np.argmax(scores, axis=1)]
report = macro_scores(predictions.tolist(), y_test, coverage_value=coverage(emitted.tolist()))
correct_emitted = (predictions[emitted] == np.asarray(y_test)[emitted]).mean()
print(f"test: macro-F1 {report.macro_f1:.3f}, emitted coverage {report.coverage:.2f}, "
      f"emitted precision {correct_emitted:.3f}")

print("\n== 3. champion/challenger registry ==")
registry = ModelRegistry(Path(tempfile.mkdtemp()) / "registry")
model.metrics["macro_f1"] = report.macro_f1
verdict = registry.validate_and_store(model, tolerance=0.03)
print(f"cold start: accepted={verdict.accepted}, version={registry.champion_version()}")

challenger = result.best
weaker = make_split(120, noise=5.0)
challenger_scores = macro_scores(
    np.asarray(challenger.classes)[np.argmax(predict_scores(challenger, weaker[0]), axis=1)].tolist(),
    weaker[1])
challenger.metrics["macro_f1"] = max(0.0, challenger_scores.macro_f1 - 0.2)  # simulate a regression
verdict = registry.validate_and_store(challenger, tolerance=0.03)
print(f"regressed challenger: accepted={verdict.accepted} "
      f"(new {verdict.new_macro_f1:.3f} vs old {verdict.old_macro_f1:.3f}, "
      f"tolerance {verdict.tolerance}); champion stays v{registry.champion_version()}")
