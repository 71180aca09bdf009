"""Evaluation: per-class confusion, macro precision/recall/F1, coverage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    support: dict[str, int]
    confusion: dict[str, dict[str, int]]  # confusion[label][prediction]
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    undefined_precision_classes: tuple[str, ...] = ()
    coverage: Optional[float] = None
    class_distribution: dict[str, float] = field(default_factory=dict)
    critical_error_fraction: Optional[float] = None  # TP<->FP confusions
    noncritical_error_fraction: Optional[float] = None  # confusions involving BP

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "support": self.support,
            "confusion": self.confusion,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "undefined_precision_classes": list(self.undefined_precision_classes),
            "coverage": self.coverage,
            "class_distribution": self.class_distribution,
            "critical_error_fraction": self.critical_error_fraction,
            "noncritical_error_fraction": self.noncritical_error_fraction,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(
            classes=tuple(doc["classes"]),
            support={k: int(v) for k, v in doc["support"].items()},
            confusion={k: {kk: int(vv) for kk, vv in v.items()} for k, v in doc["confusion"].items()},
            precision=doc["precision"],
            recall=doc["recall"],
            f1=doc["f1"],
            macro_precision=doc["macro_precision"],
            macro_recall=doc["macro_recall"],
            macro_f1=doc["macro_f1"],
            undefined_precision_classes=tuple(doc.get("undefined_precision_classes", ())),
            coverage=doc.get("coverage"),
            class_distribution=doc.get("class_distribution", {}),
            critical_error_fraction=doc.get("critical_error_fraction"),
            noncritical_error_fraction=doc.get("noncritical_error_fraction"),
        )

    def to_text_table(self) -> str:
        """Render the report in the production-table style: Supp, %cls, Pr, Re, F1."""
        header = ["Supp"] + [f"% {c}" for c in self.classes] + ["Pr", "Re", "F1"]
        total = sum(self.support.values())
        row = [str(total)]
        for c in self.classes:
            row.append(f"{self.class_distribution.get(c, 0.0) * 100:.0f}")
        row += [f"{self.macro_precision:.2f}", f"{self.macro_recall:.2f}", f"{self.macro_f1:.2f}"]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(header, widths)),
            "  ".join(v.rjust(w) for v, w in zip(row, widths)),
        ]
        if self.coverage is not None:
            lines.append(f"coverage: {self.coverage:.3f}")
        if self.undefined_precision_classes:
            lines.append("precision undefined (no predictions): " + ", ".join(self.undefined_precision_classes))
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def macro_scores(
    predictions: Sequence[str],
    labels: Sequence[str],
    classes: Optional[Sequence[str]] = None,
    coverage_value: Optional[float] = None,
) -> EvalReport:
    """Per-class precision/recall/F1 with unweighted macro averages.

    Empty denominators follow the 0 convention; classes that never get a
    prediction are flagged on the report.
    """
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if classes is None:
        classes = sorted(set(labels) | set(predictions))
    classes = tuple(str(c) for c in classes)
    class_set = set(classes)
    for label in labels:
        if str(label) not in class_set:
            raise ValueError(f"label {label!r} outside class set {classes}")

    confusion = {c: {c2: 0 for c2 in classes} for c in classes}
    for pred, label in zip(predictions, labels):
        confusion[str(label)][str(pred)] += 1

    support = {c: sum(confusion[c].values()) for c in classes}
    total = sum(support.values())

    precision: dict[str, float] = {}
    recall: dict[str, float] = {}
    f1: dict[str, float] = {}
    undefined: list[str] = []
    for c in classes:
        predicted = sum(confusion[label][c] for label in classes)
        correct = confusion[c][c]
        if predicted == 0:
            precision[c] = 0.0
            undefined.append(c)
        else:
            precision[c] = correct / predicted
        recall[c] = correct / support[c] if support[c] else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2.0 * precision[c] * recall[c] / denom if denom > 0 else 0.0

    n_classes = len(classes)
    report = EvalReport(
        classes=classes,
        support=support,
        confusion=confusion,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=sum(precision.values()) / n_classes,
        macro_recall=sum(recall.values()) / n_classes,
        macro_f1=sum(f1.values()) / n_classes,
        undefined_precision_classes=tuple(undefined),
        coverage=coverage_value,
        class_distribution={c: (support[c] / total if total else 0.0) for c in classes},
    )

    # Error taxonomy for triage grades: TP<->FP confusions are the critical
    # kind, anything involving BP is not.
    if {"TP", "FP"} <= set(classes):
        errors = sum(confusion[l][p] for l in classes for p in classes if l != p)
        if errors:
            critical = confusion["TP"].get("FP", 0) + confusion["FP"].get("TP", 0)
            report.critical_error_fraction = critical / errors
            report.noncritical_error_fraction = 1.0 - critical / errors
    return report


def coverage(emitted: Sequence[bool]) -> float:
    """Fraction of items that received an emitted recommendation; 0 when empty."""
    if not len(emitted):
        return 0.0
    return sum(1 for e in emitted if e) / len(emitted)
