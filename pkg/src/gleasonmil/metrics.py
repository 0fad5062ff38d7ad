"""Ordinal and per-class evaluation: confusion matrices, quadratic kappa,
per-class F1, and binary cancer-vs-benign precision/sensitivity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "EvaluationReport",
    "UndefinedMetricError",
    "confusion",
    "accuracy",
    "per_class_f1",
    "quadratic_kappa",
    "binary_cancer_metrics",
    "evaluate_labels",
]

GRADE_CLASS_NAMES = ("NC", "GG3", "GG4", "GG5")


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""


@dataclass
class ConfusionMatrix:
    """K x K integer counts; rows are truth, columns are prediction."""

    counts: np.ndarray
    classes: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]


def confusion(y_true: Sequence[int], y_pred: Sequence[int], k: int,
              classes: Sequence[str] | None = None) -> ConfusionMatrix:
    """Count (truth, prediction) pairs into a K x K matrix."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size == 0:
        raise ValueError("y_true and y_pred must be equal-length nonempty vectors")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} contains labels outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    if classes is None:
        classes = tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts, tuple(classes))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def per_class_f1(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class F1 (0 where precision + recall is 0) and its unweighted mean."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = 2.0 * tp + (counts.sum(axis=0) - tp) + (counts.sum(axis=1) - tp)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, float(f1.mean())


def quadratic_kappa(cm: ConfusionMatrix) -> float:
    """Cohen's quadratically weighted kappa on an ordinal class set.

    kappa = 1 - sum(w * O) / sum(w * E) with w_ij = (i - j)^2 / (K - 1)^2,
    O the observed proportion matrix and E the outer product of its
    marginals. Raises when expected disagreement is zero (both marginals
    concentrated on the same single class).
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    k = cm.k
    observed = cm.counts.astype(np.float64) / cm.total
    idx = np.arange(k, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    denom = float((weights * expected).sum())
    if denom == 0.0:
        raise UndefinedMetricError("kappa undefined: no expected disagreement")
    return float(1.0 - (weights * observed).sum() / denom)


def binary_cancer_metrics(y_true: Sequence[int], y_pred: Sequence[int],
                          positive: str = "cancerous") -> tuple[float | None, float | None]:
    """Precision and sensitivity after binarizing grades to cancer vs NC.

    ``positive`` selects which side counts as the positive class
    ("cancerous" = any of GG3/GG4/GG5, or "nc"). A zero denominator yields
    None rather than 0 so degenerate inputs stay visible.
    """
    if positive not in ("cancerous", "nc"):
        raise ValueError(f"positive must be 'cancerous' or 'nc', got {positive!r}")
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must be equal-length nonempty vectors")
    true_pos = (y_true > 0) if positive == "cancerous" else (y_true == 0)
    pred_pos = (y_pred > 0) if positive == "cancerous" else (y_pred == 0)
    tp = int(np.sum(true_pos & pred_pos))
    fp = int(np.sum(~true_pos & pred_pos))
    fn = int(np.sum(true_pos & ~pred_pos))
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    sensitivity = tp / (tp + fn) if (tp + fn) > 0 else None
    return precision, sensitivity


@dataclass
class EvaluationReport:
    """Bundle of the evaluation figures emitted for one prediction set."""

    cm: ConfusionMatrix
    acc: float
    f1: np.ndarray
    f1_avg: float
    kappa: float | None
    cancer_precision: float | None
    cancer_sensitivity: float | None
    nc_precision: float | None = None
    nc_sensitivity: float | None = None
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        lines = [
            "classes: " + " ".join(self.cm.classes),
            "confusion (rows=truth):",
        ]
        for row in self.cm.counts:
            lines.append("  " + " ".join(f"{int(v):6d}" for v in row))
        lines.append(f"ACC: {self.acc:.4f}")
        per_class = " ".join(f"{n}={v:.4f}" for n, v in zip(self.cm.classes, self.f1))
        lines.append(f"F1: {per_class} avg={self.f1_avg:.4f}")
        lines.append(f"kappa: {fmt(self.kappa)}")
        lines.append(f"binary cancer precision: {fmt(self.cancer_precision)}")
        lines.append(f"binary cancer sensitivity: {fmt(self.cancer_sensitivity)}")
        lines.append(f"binary NC precision: {fmt(self.nc_precision)}")
        lines.append(f"binary NC sensitivity: {fmt(self.nc_sensitivity)}")
        for key, value in self.extra.items():
            lines.append(f"{key}: {fmt(value) if isinstance(value, (float, type(None))) else value}")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[tuple[str, str]]:
        def fmt(v):
            return "undefined" if v is None else repr(float(v))

        rows = [("accuracy", fmt(self.acc))]
        for name, value in zip(self.cm.classes, self.f1):
            rows.append((f"f1_{name.lower()}", fmt(value)))
        rows.append(("f1_avg", fmt(self.f1_avg)))
        rows.append(("kappa", fmt(self.kappa)))
        rows.append(("cancer_precision", fmt(self.cancer_precision)))
        rows.append(("cancer_sensitivity", fmt(self.cancer_sensitivity)))
        rows.append(("nc_precision", fmt(self.nc_precision)))
        rows.append(("nc_sensitivity", fmt(self.nc_sensitivity)))
        for key, value in self.extra.items():
            rows.append((key, fmt(value) if isinstance(value, (float, type(None))) else str(value)))
        return rows


def evaluate_labels(y_true: Sequence[int], y_pred: Sequence[int], k: int = 4,
                    classes: Sequence[str] = GRADE_CLASS_NAMES,
                    binary: bool = True) -> EvaluationReport:
    """Full report for a label vector pair: ACC, per-class F1, kappa, and
    (for the 4-grade space) binary cancer metrics in both polarities."""
    cm = confusion(y_true, y_pred, k, classes)
    f1, f1_avg = per_class_f1(cm)
    try:
        kappa = quadratic_kappa(cm)
    except UndefinedMetricError:
        kappa = None
    cancer_p = cancer_s = nc_p = nc_s = None
    if binary:
        cancer_p, cancer_s = binary_cancer_metrics(y_true, y_pred, positive="cancerous")
        nc_p, nc_s = binary_cancer_metrics(y_true, y_pred, positive="nc")
    return EvaluationReport(cm, accuracy(cm), f1, f1_avg, kappa,
                            cancer_p, cancer_s, nc_p, nc_s)
