"""ROC analysis: AUC and specificity at a target sensitivity."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_TARGET_SENSITIVITY = 0.8


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; the first entry is +inf (nothing predicted positive)
    tpr: np.ndarray
    fpr: np.ndarray


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y


def roc_curve(scores, labels) -> RocCurve:
    """ROC points with equal scores grouped into one threshold step.

    A sample is predicted positive when ``score >= threshold``.
    """
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1) if s.size else ends
    tp = np.cumsum(y)[ends] if s.size else np.empty(0)
    fp = (ends + 1) - tp
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    tpr = np.concatenate([[0.0], tp / n_pos if n_pos else np.zeros_like(tp, dtype=float)])
    fpr = np.concatenate([[0.0], fp / n_neg if n_neg else np.zeros_like(fp, dtype=float)])
    thresholds = np.concatenate([[np.inf], s[ends]])
    return RocCurve(thresholds, tpr, fpr)


def auc(scores, labels) -> float | None:
    """Trapezoidal ROC area; ``None`` when only one class is present."""
    s, y = _validate(scores, labels)
    if y.min(initial=1) == y.max(initial=0) or s.size == 0:
        return None
    roc = roc_curve(s, y)
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2.0))


def sens_spec_at(scores, labels, target_sensitivity: float = DEFAULT_TARGET_SENSITIVITY):
    """Operating point at the largest threshold whose sensitivity reaches the target.

    Returns ``(threshold, sensitivity, specificity)``; specificity is ``None``
    when there are no negatives.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("sens_spec_at needs at least one positive sample")
    if not 0.0 <= target_sensitivity <= 1.0:
        raise ValueError(f"target sensitivity must be in [0, 1], got {target_sensitivity}")
    roc = roc_curve(s, y)
    hit = np.flatnonzero(roc.tpr >= target_sensitivity - 1e-12)
    i = int(hit[0])
    if i == 0 and target_sensitivity > 0:
        i = 1
    n_neg = y.size - n_pos
    spec = float(1.0 - roc.fpr[i]) if n_neg else None
    return float(roc.thresholds[i]), float(roc.tpr[i]), spec


@dataclass(frozen=True)
class Metrics:
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    threshold: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, target_sensitivity: float = DEFAULT_TARGET_SENSITIVITY) -> Metrics:
    s, y = _validate(scores, labels)
    a = auc(s, y)
    if y.sum() == 0:
        return Metrics(a, None, None, None)
    thr, sens, spec = sens_spec_at(s, y, target_sensitivity)
    return Metrics(a, sens, spec, thr)


def write_roc_csv(path, scores, labels) -> None:
    roc = roc_curve(scores, labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("threshold", "fpr", "tpr"))
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow((t, f, p))
