"""Confusion-matrix classification metrics: accuracy, precision, recall, F1, Cohen's kappa."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("advanced", "early", "normal")
REPORT_COLUMNS = ("Accuracy", "Precision", "Recall", "F1-score", "Cohen's kappa")


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """``counts[t, p]``: samples with true class ``t`` predicted as ``p``."""

    counts: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k):
            raise MetricsError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricsError("confusion matrix counts must be non-negative")
        if not self.class_names:
            self.class_names = CLASS_NAMES if k == 3 else tuple(str(i) for i in range(k))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()

    def support(self):
        return self.counts.sum(axis=1)


def confusion(y_true, y_pred, k: int, class_names=()) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise MetricsError(f"length mismatch: {y_true.size} true labels vs {y_pred.size} predictions")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise MetricsError(f"{name} label out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def _require_nonempty(cm: ConfusionMatrix):
    if cm.total == 0:
        raise MetricsError("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def _safe_ratio(num, den, what):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    if zero.any():
        warnings.warn(f"{what}: zero denominator for classes {np.flatnonzero(zero).tolist()}; scored 0",
                      RuntimeWarning, stacklevel=3)
    return np.where(zero, 0.0, num / np.where(zero, 1.0, den))


@dataclass
class PerClass:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray


def per_class(cm: ConfusionMatrix) -> PerClass:
    _require_nonempty(cm)
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    precision = _safe_ratio(tp, tp + fp, "precision")
    recall = _safe_ratio(tp, tp + fn, "recall")
    f1 = _safe_ratio(2 * precision * recall, precision + recall, "f1")
    return PerClass(precision, recall, f1, cm.support())


def precision_recall_f1(cm: ConfusionMatrix, averaging: str = "weighted"):
    """Precision, recall and F1 as a per-class :class:`PerClass` or averaged triple."""
    if averaging not in ("per_class", "weighted", "macro"):
        raise ValueError(f"unknown averaging {averaging!r}")
    pc = per_class(cm)
    return pc if averaging == "per_class" else _average(pc, averaging)


def _average(pc: PerClass, averaging: str) -> tuple[float, float, float]:
    k = len(pc.support)
    w = pc.support / pc.support.sum() if averaging == "weighted" else np.full(k, 1.0 / k)
    return float(w @ pc.precision), float(w @ pc.recall), float(w @ pc.f1)


def kappa_terms(cm: ConfusionMatrix) -> tuple[float, float]:
    """Observed agreement ``p0`` and chance agreement ``pe``."""
    _require_nonempty(cm)
    n = float(cm.total)
    p0 = float(np.trace(cm.counts)) / n
    pe = float(cm.counts.sum(axis=1).astype(np.float64) @ cm.counts.sum(axis=0)) / (n * n)
    return p0, pe


def cohen_kappa(cm: ConfusionMatrix) -> float:
    p0, pe = kappa_terms(cm)
    if pe == 1.0:
        warnings.warn("chance agreement is 1; kappa undefined, reported as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return (p0 - pe) / (1.0 - pe)


@dataclass
class MetricReport:
    per_class: PerClass
    accuracy: float
    precision: float
    recall: float
    f1: float
    kappa: float
    averaging: str
    class_names: tuple

    def row(self) -> tuple[float, ...]:
        """Aggregates in table column order."""
        return (self.accuracy, self.precision, self.recall, self.f1, self.kappa)


def report(cm: ConfusionMatrix, averaging: str = "weighted") -> MetricReport:
    if averaging not in ("per_class", "weighted", "macro"):
        raise ValueError(f"unknown averaging {averaging!r}")
    pc = per_class(cm)
    p, r, f = _average(pc, averaging) if averaging != "per_class" else (np.nan,) * 3
    return MetricReport(pc, accuracy(cm), p, r, f, cohen_kappa(cm), averaging, cm.class_names)


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}"


def render_report(cm: ConfusionMatrix, averaging: str = "weighted") -> tuple[str, str]:
    """Human-readable table and CSV text for ``cm``; values are percentages, 2 decimals."""
    rep = report(cm, averaging)
    head = "  ".join(f"{c:>13}" for c in REPORT_COLUMNS)
    vals = "  ".join(f"{_pct(v):>13}" for v in rep.row())
    lines = [head, vals, "", f"{'class':<10}{'precision':>11}{'recall':>9}{'f1':>9}{'support':>9}"]
    for i, name in enumerate(rep.class_names):
        lines.append(f"{name:<10}{_pct(rep.per_class.precision[i]):>11}{_pct(rep.per_class.recall[i]):>9}"
                     f"{_pct(rep.per_class.f1[i]):>9}{int(rep.per_class.support[i]):>9}")
    return "\n".join(lines), to_csv(rep)


def to_csv(rep: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "support"])
    for i, name in enumerate(rep.class_names):
        w.writerow([name, _pct(rep.per_class.precision[i]), _pct(rep.per_class.recall[i]),
                    _pct(rep.per_class.f1[i]), int(rep.per_class.support[i])])
    w.writerow([])
    w.writerow(["metric", "value"])
    for col, v in zip(REPORT_COLUMNS, rep.row()):
        w.writerow([col, _pct(v)])
    w.writerow(["averaging", rep.averaging])
    return buf.getvalue()


def parse_csv(text: str) -> dict:
    """Inverse of :func:`to_csv`: ``{"classes": {...}, "aggregate": {...}}``."""
    rows = list(csv.reader(io.StringIO(text)))
    classes, aggregate, section = {}, {}, "classes"
    for row in rows[1:]:
        if not row:
            section = "aggregate"
            continue
        if section == "classes":
            classes[row[0]] = {"precision": float(row[1]), "recall": float(row[2]),
                               "f1": float(row[3]), "support": int(row[4])}
        elif row[0] == "metric":
            continue
        elif row[0] == "averaging":
            aggregate["averaging"] = row[1]
        else:
            aggregate[row[0]] = float(row[1])
    return {"classes": classes, "aggregate": aggregate}
