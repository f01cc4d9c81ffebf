"""Classification metrics: overall accuracy, average accuracy, Cohen's kappa."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import PatchSet


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted."""

    counts: np.ndarray
    classes: tuple[int, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if counts.shape != (k, k):
            raise ValueError(f"counts shape {counts.shape} != ({k}, {k})")
        if counts.min() < 0:
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(y_true, y_pred, classes) -> ConfusionMatrix:
    classes = tuple(int(c) for c in classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        if int(t) not in index or int(p) not in index:
            raise ValueError(f"label {t if int(t) not in index else p} not in classes {classes}")
        counts[index[int(t)], index[int(p)]] += 1
    return ConfusionMatrix(counts, classes)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Trace over total, as a percentage."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return 100.0 * float(np.trace(cm.counts)) / cm.total


def average_accuracy(cm: ConfusionMatrix) -> tuple[float, tuple[int, ...]]:
    """Mean per-class recall (percent) and the classes excluded for absence."""
    row_sums = cm.counts.sum(axis=1)
    present = row_sums > 0
    if not present.any():
        raise ValueError("empty confusion matrix")
    recalls = np.diag(cm.counts)[present] / row_sums[present]
    excluded = tuple(c for c, p in zip(cm.classes, present) if not p)
    return 100.0 * float(recalls.mean()), excluded


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa (percent): (p_o - p_e) / (1 - p_e), chance from marginals."""
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = float(np.trace(cm.counts)) / total
    p_e = float((cm.counts.sum(axis=0) * cm.counts.sum(axis=1)).sum()) / (total * total)
    if p_e == 1.0:
        return 100.0 if p_o == 1.0 else 0.0
    return 100.0 * ((p_o - p_e) / (1.0 - p_e))


@dataclass(frozen=True)
class EvaluationResult:
    confusion: ConfusionMatrix
    oa: float
    aa: float
    kappa: float
    aa_excluded: tuple[int, ...]


def evaluate(model, patches: PatchSet) -> EvaluationResult:
    """Score a model on a patch set; metrics are percentages.

    Classes absent from the set are excluded from AA and reported in
    ``aa_excluded``.  Result is independent of patch ordering.
    """
    if len(patches) == 0:
        raise ValueError("cannot evaluate on an empty patch set")
    preds = model.predict(patches.values)
    cm = confusion_matrix(patches.labels, preds, model.classes_)
    oa = overall_accuracy(cm)
    aa, excluded = average_accuracy(cm)
    return EvaluationResult(cm, oa, aa, kappa(cm), excluded)
