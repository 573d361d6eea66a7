"""Confusion matrices, one-vs-rest metric suites, and comparison reports.

Metric arithmetic is exact: counts go through fractions.Fraction and only
become floats at the reporting boundary, so accuracy is trace/total by
construction rather than within rounding error of it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (
    ComparisonError,
    DimensionError,
    InvalidLabelError,
    InvalidParameterError,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {list(counts.shape)}")
        if len(self.class_names) != counts.shape[0]:
            raise DimensionError("class name count does not match matrix size")
        if np.any(counts < 0):
            raise InvalidParameterError("confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))


def confusion(true_labels, pred_labels, classes) -> ConfusionMatrix:
    """Tally (true, predicted) pairs. `classes` is a name sequence or a
    bare class count."""
    if isinstance(classes, (int, np.integer)):
        names = tuple(f"class_{i}" for i in range(int(classes)))
    else:
        names = tuple(str(c) for c in classes)
    c = len(names)
    if c < 2:
        raise InvalidParameterError(f"need >= 2 classes, got {c}")
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise DimensionError(
            f"label arrays must be equal-length 1D, got {list(t.shape)} and {list(p.shape)}")
    for what, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise InvalidLabelError(f"{what} labels outside [0, {c})")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, names)


@dataclass(frozen=True)
class ClassMetrics:
    """One-vs-rest counts and exact ratios for a single class."""

    name: str
    tp: int
    tn: int
    fp: int
    fn: int
    precision: Fraction
    recall: Fraction
    f1: Fraction


@dataclass(frozen=True)
class MetricsReport:
    class_names: tuple
    per_class: tuple
    accuracy: Fraction
    macro_precision: Fraction
    macro_recall: Fraction
    macro_f1: Fraction
    n_samples: int
    n_correct: int

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "per_class": [
                {"name": m.name, "tp": m.tp, "tn": m.tn, "fp": m.fp, "fn": m.fn,
                 "precision": float(m.precision), "recall": float(m.recall),
                 "f1": float(m.f1)}
                for m in self.per_class
            ],
            "accuracy": float(self.accuracy),
            "macro_precision": float(self.macro_precision),
            "macro_recall": float(self.macro_recall),
            "macro_f1": float(self.macro_f1),
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
            encoding="utf-8")


def _safe_ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest precision/recall/F1 plus macro averages.

    Zero-denominator cases are defined as 0: precision with no positive
    predictions, recall with no positive samples, F1 when P + R = 0.
    """
    total = cm.total
    if total == 0:
        raise InvalidParameterError("cannot compute metrics on an empty matrix")
    per_class = []
    for i, name in enumerate(cm.class_names):
        tp = int(cm.counts[i, i])
        fp = int(cm.counts[:, i].sum()) - tp
        fn = int(cm.counts[i, :].sum()) - tp
        tn = total - tp - fp - fn
        p = _safe_ratio(tp, tp + fp)
        r = _safe_ratio(tp, tp + fn)
        f1 = 2 * p * r / (p + r) if p + r > 0 else Fraction(0)
        per_class.append(ClassMetrics(name, tp, tn, fp, fn, p, r, f1))
    c = len(per_class)
    return MetricsReport(
        class_names=cm.class_names,
        per_class=tuple(per_class),
        accuracy=Fraction(cm.trace, total),
        macro_precision=sum(m.precision for m in per_class) / c,
        macro_recall=sum(m.recall for m in per_class) / c,
        macro_f1=sum(m.f1 for m in per_class) / c,
        n_samples=total,
        n_correct=cm.trace,
    )


def percent(value, decimals: int = 2) -> float:
    """Display-time rounding only; everything upstream stays exact."""
    return round(100.0 * float(value), decimals)


# ----------------------------------------------------------------- reports

_CSV_FIELDS = ["run", "avg_precision", "avg_recall", "avg_f1", "accuracy"]


def compare_report(runs, out_dir, stem: str = "comparison"):
    """Write a CSV metric table and an accuracy bar chart for named runs.

    All runs must share one class scheme. Returns (csv_path, png_path).
    """
    if not runs:
        raise InvalidParameterError("need at least one (name, report) run")
    names = runs[0][1].class_names
    for run_name, report in runs[1:]:
        if report.class_names != names:
            raise ComparisonError(
                f"run {run_name!r} uses classes {report.class_names}, "
                f"expected {names}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_FIELDS)
        for run_name, report in runs:
            writer.writerow([
                run_name,
                repr(float(report.macro_precision)),
                repr(float(report.macro_recall)),
                repr(float(report.macro_f1)),
                repr(float(report.accuracy)),
            ])
    png_path = out_dir / f"{stem}.png"
    accuracy_bars(runs, png_path)
    return csv_path, png_path


def load_comparison_csv(path) -> list:
    """Inverse of the compare_report table: [(run, {metric: float})]."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_FIELDS:
            raise ComparisonError(f"unexpected comparison header {header}")
        return [(row[0], {k: float(v) for k, v in zip(_CSV_FIELDS[1:], row[1:])})
                for row in reader]


def _agg_axes():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


_PNG_META = {"Software": "cervifuse"}


def accuracy_bars(runs, path) -> None:
    """Per-run accuracy bar chart (percent scale)."""
    plt = _agg_axes()
    names = [name for name, _ in runs]
    accs = [percent(report.accuracy) for _, report in runs]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(runs)), 3.2))
    ax.bar(names, accs, color="#4878a8")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    for i, v in enumerate(accs):
        ax.text(i, v + 1, f"{v:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def confusion_heatmap(cm: ConfusionMatrix, path, title: str = "") -> None:
    """Annotated count heatmap, true classes on rows."""
    plt = _agg_axes()
    c = cm.n_classes
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * c, 1.0 + 0.7 * c))
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(c), cm.class_names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(c), cm.class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    cutoff = cm.counts.max() / 2 if cm.total else 0
    for i in range(c):
        for j in range(c):
            v = int(cm.counts[i, j])
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7,
                    color="white" if v > cutoff else "black")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
