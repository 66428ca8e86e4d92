"""Confusion matrices, per-class precision/recall/F1 and their aggregates."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import LinearSegmentedColormap, Normalize
from matplotlib.figure import Figure

from .errors import ArtifactIOError, DataError

STRATEGIES = ("macro", "micro", "weighted")
WHITE_BLUE = LinearSegmentedColormap.from_list("white_blue", ["#ffffff", "#08306b"])


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: list[str]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], k: int,
                     class_names: list[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DataError(f"y_true has {y_true.size} entries but y_pred has {y_pred.size}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        bad = arr[(arr < 0) | (arr >= k)]
        if bad.size:
            raise DataError(f"{name} contains label {int(bad[0])} outside [0, {k})")
    counts = np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, list(class_names) if class_names else [str(i) for i in range(k)])


@dataclass
class PerClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    # class indices whose metric had a zero denominator and was set to 0
    undefined: dict[str, list[int]] = field(default_factory=dict)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, list[int]]:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return out, [int(i) for i in np.flatnonzero(den == 0)]


def per_class_metrics(cm: ConfusionMatrix) -> PerClassMetrics:
    counts = cm.counts
    tp = np.diag(counts).astype(np.int64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    precision, p_undef = _safe_ratio(tp, tp + fp)
    recall, r_undef = _safe_ratio(tp, tp + fn)
    f1, f_undef = _safe_ratio(2 * precision * recall, precision + recall)
    undefined = {name: idx for name, idx in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef)) if idx}
    return PerClassMetrics(precision, recall, f1, tp + fn, tp, fp, fn, undefined)


def aggregate(pc: PerClassMetrics, strategy: str) -> dict[str, float]:
    """Collapse per-class metrics. Accuracy is included with every strategy."""
    total = int(pc.support.sum())
    accuracy = float(pc.tp.sum() / total) if total else 0.0
    if strategy == "macro":
        p, r, f = (float(np.mean(v)) for v in (pc.precision, pc.recall, pc.f1))
    elif strategy == "weighted":
        w = pc.support / total if total else np.zeros(len(pc.support))
        p, r, f = (float(np.sum(w * v)) for v in (pc.precision, pc.recall, pc.f1))
    elif strategy == "micro":
        tp, fp, fn = int(pc.tp.sum()), int(pc.fp.sum()), int(pc.fn.sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
    else:
        raise ValueError(f"unknown aggregation strategy {strategy!r}; choose from {STRATEGIES}")
    return {"precision": p, "recall": r, "f1": f, "accuracy": accuracy}


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: PerClassMetrics
    aggregates: dict[str, dict[str, float]]

    @property
    def accuracy(self) -> float:
        return self.aggregates["micro"]["accuracy"]

    def to_dict(self) -> dict:
        pc = self.per_class
        return {
            "accuracy": self.accuracy,
            "per_class": [
                {"class": name, "precision": float(pc.precision[i]), "recall": float(pc.recall[i]),
                 "f1": float(pc.f1[i]), "support": int(pc.support[i])}
                for i, name in enumerate(self.class_names)
            ],
            "undefined": pc.undefined,
            "aggregates": self.aggregates,
        }

    def save_json(self, path: str | Path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        except OSError as e:
            raise ArtifactIOError(f"cannot write metrics to {path}: {e}") from e


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    pc = per_class_metrics(cm)
    return MetricsReport(cm.class_names, pc, {s: aggregate(pc, s) for s in STRATEGIES})


def confusion_colors(cm: ConfusionMatrix) -> np.ndarray:
    """RGBA color of every cell: white at 0, dark blue at the largest count."""
    norm = Normalize(vmin=0, vmax=max(int(cm.counts.max(initial=0)), 1))
    return WHITE_BLUE(norm(cm.counts))


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + cm.class_names)
            for name, row in zip(cm.class_names, cm.counts):
                writer.writerow([name] + [int(v) for v in row])
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e


def read_confusion_csv(path: str | Path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, names)


def render_confusion(cm: ConfusionMatrix, stem: str | Path, title: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.png`` (heatmap) and ``<stem>.csv`` (exact counts)."""
    stem = Path(stem)
    png, csv_path = stem.with_suffix(".png"), stem.with_suffix(".csv")
    write_confusion_csv(cm, csv_path)

    fig = Figure(figsize=(1.0 + 0.55 * cm.k, 0.8 + 0.55 * cm.k))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot()
    ax.imshow(confusion_colors(cm), interpolation="nearest")
    vmax = max(int(cm.counts.max(initial=0)), 1)
    for (i, j), v in np.ndenumerate(cm.counts):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=7,
                color="white" if v > vmax / 2 else "black")
    ax.set_xticks(range(cm.k), cm.class_names)
    ax.set_yticks(range(cm.k), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    try:
        fig.savefig(png, dpi=100)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {png}: {e}") from e
    return png, csv_path
