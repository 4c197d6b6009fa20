"""Study-level aggregation, point metrics, AUROC, operating-point choice and per-anatomy reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import ANATOMIES
from .errors import InputError, UndefinedMetricError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auroc")
CSV_HEADER = ("anatomy",) + METRIC_NAMES
PREDICTIONS_HEADER = ("patient_id", "study_id", "anatomy", "prob", "label")


def aggregate_study(view_probs: Sequence[float]) -> float:
    """Mean probability across a study's views."""
    probs = np.asarray(view_probs, dtype=np.float64)
    if probs.size == 0:
        raise InputError("a study needs at least one view probability")
    if (probs < 0).any() or (probs > 1).any():
        raise InputError("view probabilities must lie in [0, 1]")
    return float(probs.mean())


@dataclass(frozen=True)
class Prediction:
    patient_id: str
    study_id: str
    anatomy: str
    view_probs: tuple[float, ...]
    prob: float = field(default=float("nan"))

    def __post_init__(self):
        object.__setattr__(self, "view_probs", tuple(float(p) for p in self.view_probs))
        if math.isnan(self.prob):
            object.__setattr__(self, "prob", aggregate_study(self.view_probs))

    def verdict(self, threshold: float) -> int:
        return int(self.prob >= threshold)


@dataclass(frozen=True)
class PointMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def _check_pair(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise InputError(f"probabilities {probs.shape} and labels {labels.shape} must be equal-length vectors")
    if probs.size == 0:
        raise InputError("need at least one prediction")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    return probs, labels.astype(np.int64)


def confusion_and_point_metrics(probs, labels, threshold: float) -> PointMetrics:
    """Confusion counts with verdict = prob ≥ threshold; empty-denominator ratios are 0."""
    probs, labels = _check_pair(probs, labels)
    pred = probs >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    tn = int((~pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PointMetrics(tp, fp, tn, fn, (tp + tn) / labels.size, precision, recall, f1)


def auroc(probs, labels) -> float:
    """Mann–Whitney AUROC with average ranks, so tied pairs count one half."""
    probs, labels = _check_pair(probs, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(probs, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def youden_j(probs, labels, threshold: float) -> float:
    m = confusion_and_point_metrics(probs, labels, threshold)
    return m.tp / (m.tp + m.fn) + m.tn / (m.tn + m.fp) - 1.0


def threshold_candidates(probs) -> np.ndarray:
    """0, 1 and midpoints between adjacent distinct scores, ascending."""
    u = np.unique(np.asarray(probs, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def select_threshold(val_probs, val_labels) -> float:
    """Threshold maximizing sensitivity + specificity − 1; ties go to the lowest candidate."""
    probs, labels = _check_pair(val_probs, val_labels)
    pos = labels == 1
    if pos.all() or not pos.any():
        raise UndefinedMetricError("threshold selection needs both classes")
    best_t, best_j = None, -np.inf
    for t in threshold_candidates(probs):
        j = youden_j(probs, labels, t)
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t


@dataclass(frozen=True)
class MetricsRow:
    anatomy: str
    n: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None  # None when the bucket holds a single class

    def values(self) -> tuple:
        return tuple(getattr(self, k) for k in METRIC_NAMES)


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]  # anatomies in canonical order, then "overall"
    threshold: float
    macro: dict
    binary_macro_f1: float

    @property
    def overall(self) -> MetricsRow:
        return self.rows[-1]

    def row(self, anatomy: str) -> MetricsRow:
        for r in self.rows:
            if r.anatomy == anatomy:
                return r
        raise KeyError(anatomy)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [r.__dict__ for r in self.rows],
            "macro": self.macro,
            "binary_macro_f1": self.binary_macro_f1,
        }


def _row(name: str, probs: np.ndarray, labels: np.ndarray, threshold: float) -> MetricsRow:
    m = confusion_and_point_metrics(probs, labels, threshold)
    try:
        auc = auroc(probs, labels)
    except UndefinedMetricError:
        auc = None
    return MetricsRow(name, int(labels.size), m.accuracy, m.precision, m.recall, m.f1, auc)


def build_report(predictions: Sequence[Prediction], labels: Sequence[int], threshold: float) -> MetricsReport:
    """Per-anatomy rows, a pooled overall row and an unweighted macro mean over anatomies."""
    if len(predictions) != len(labels):
        raise InputError("predictions and labels differ in length")
    if not predictions:
        raise InputError("cannot report on zero predictions")
    probs = np.array([p.prob for p in predictions])
    labels = np.asarray(labels, dtype=np.int64)
    anat = np.array([p.anatomy for p in predictions])
    unknown = set(anat) - set(ANATOMIES)
    if unknown:
        raise InputError(f"predictions carry unknown anatomy tags {sorted(unknown)}")

    rows = [_row(a, probs[anat == a], labels[anat == a], threshold) for a in ANATOMIES if (anat == a).any()]
    macro = {}
    for k in METRIC_NAMES:
        vals = [getattr(r, k) for r in rows if getattr(r, k) is not None]
        macro[k] = float(np.mean(vals)) if vals else None
    overall = _row("overall", probs, labels, threshold)

    # F1 with each class in turn as the positive one, averaged
    m = confusion_and_point_metrics(probs, labels, threshold)
    p_neg = m.tn / (m.tn + m.fn) if m.tn + m.fn else 0.0
    r_neg = m.tn / (m.tn + m.fp) if m.tn + m.fp else 0.0
    f1_neg = 2 * p_neg * r_neg / (p_neg + r_neg) if p_neg + r_neg else 0.0
    binary_macro_f1 = (overall.f1 + f1_neg) / 2.0
    return MetricsReport(tuple(rows) + (overall,), float(threshold), macro, float(binary_macro_f1))


def _cell(v, digits: int) -> str:
    return "undefined" if v is None else f"{v:.{digits}f}"


def render_csv(report: MetricsReport, digits: int = 6) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        w.writerow([r.anatomy] + [_cell(v, digits) for v in r.values()])
    w.writerow(["macro"] + [_cell(report.macro[k], digits) for k in METRIC_NAMES])
    return buf.getvalue()


def render_table(report: MetricsReport, digits: int = 2) -> str:
    """Plain-text table in the per-anatomy layout (anatomies, then Overall)."""
    header = ("Anatomy", "Accuracy", "Precision", "Recall", "F1-Score", "AUROC")
    body = [[r.anatomy.capitalize()] + [_cell(v, digits) for v in r.values()] for r in report.rows]
    widths = [max(len(header[i]), *(len(row[i]) for row in body)) for i in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    out = [line(header), line(["-" * w for w in widths])]
    out += [line(row) for row in body]
    macro = "  ".join(f"{k}={_cell(report.macro[k], digits)}" for k in METRIC_NAMES)
    out.append("")
    out.append(f"threshold: {report.threshold:.6f}")
    out.append(f"macro over anatomies: {macro}")
    out.append(f"binary macro-F1: {report.binary_macro_f1:.{digits}f}")
    return "\n".join(out) + "\n"


def write_predictions(path: str | Path, predictions: Sequence[Prediction], labels: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTIONS_HEADER)
        for p, y in zip(predictions, labels):
            w.writerow([p.patient_id, p.study_id, p.anatomy, repr(float(p.prob)), int(y)])


def read_predictions(path: str | Path) -> tuple[list[Prediction], list[int]]:
    preds, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            prob = float(row["prob"])
            preds.append(Prediction(row["patient_id"], row["study_id"], row["anatomy"], (prob,), prob))
            labels.append(int(row["label"]))
    return preds, labels
