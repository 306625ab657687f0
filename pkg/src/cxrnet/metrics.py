"""Multi-class evaluation: confusion matrix and per-class precision/recall/F1.

The confusion matrix is laid out rows = true class, columns = predicted
class.  A class absent from both predictions and truth would divide by zero;
those entries are reported as 0.0 and flagged rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match {k} classes")
        if self.counts.dtype.kind not in "iu" or (self.counts < 0).any():
            raise ValueError("counts must be non-negative integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (self.class_names == other.class_names
                and np.array_equal(self.counts, other.counts))


def confusion_matrix(predictions, labels, class_names) -> ConfusionMatrix:
    """Tally integer class indices; rows index the true class."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(
            f"got {pred.size} predictions for {true.size} labels")
    k = len(class_names)
    if pred.size and (pred.min() < 0 or pred.max() >= k or true.min() < 0 or true.max() >= k):
        raise ValueError(f"class indices must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, tuple(class_names))


@dataclass(frozen=True)
class ClassificationReport:
    class_names: tuple[str, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    accuracy: float
    zero_division: tuple[str, ...] = field(default=())


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    if cm.total == 0:
        raise ValueError("cannot build a report from an empty confusion matrix")
    diag = np.diag(cm.counts).astype(np.float64)
    col = cm.counts.sum(axis=0).astype(np.float64)
    row = cm.counts.sum(axis=1).astype(np.float64)
    flagged: list[str] = []
    precision, recall, f1 = [], [], []
    for i, name in enumerate(cm.class_names):
        hit = False
        if col[i] > 0:
            p = diag[i] / col[i]
        else:
            p, hit = 0.0, True
        if row[i] > 0:
            r = diag[i] / row[i]
        else:
            r, hit = 0.0, True
        if p + r > 0:
            f = 2.0 * p * r / (p + r)
        else:
            f, hit = 0.0, True
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(f))
        if hit:
            flagged.append(name)
    return ClassificationReport(
        class_names=cm.class_names,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        support=tuple(int(s) for s in row),
        accuracy=float(diag.sum() / cm.total),
        zero_division=tuple(flagged),
    )


def report_text(rep: ClassificationReport) -> str:
    width = max(len(n) for n in rep.class_names + ("class",))
    lines = [f"{'class':<{width}}  precision  recall  f1      support"]
    for i, name in enumerate(rep.class_names):
        lines.append(
            f"{name:<{width}}  {rep.precision[i]:>9.2f}  {rep.recall[i]:>6.2f}"
            f"  {rep.f1[i]:>6.2f}  {rep.support[i]:>7d}")
    lines.append(f"Accuracy: {rep.accuracy:.4f}")
    if rep.zero_division:
        lines.append("zero-division classes: " + ", ".join(rep.zero_division))
    return "\n".join(lines)


def report_json(rep: ClassificationReport) -> dict:
    return {
        "accuracy": round(rep.accuracy, 4),
        "classes": {
            name: {
                "precision": round(rep.precision[i], 4),
                "recall": round(rep.recall[i], 4),
                "f1": round(rep.f1[i], 4),
                "support": rep.support[i],
            }
            for i, name in enumerate(rep.class_names)
        },
        "zero_division": list(rep.zero_division),
    }
