"""Confusion matrices, per-dialect precision/recall/F1 and two-decimal reports."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Sequence

import numpy as np

from .corpus import NUM_DIALECTS, REGISTRY, Registry


def confusion(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = NUM_DIALECTS) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true labels vs {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class EvalReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float

    @property
    def total(self) -> int:
        return int(self.support.sum())

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean()) if self.precision.size else 0.0

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean()) if self.recall.size else 0.0

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean()) if self.f1.size else 0.0


def metrics(cm: np.ndarray) -> EvalReport:
    """Per-class metrics; any 0/0 ratio is reported as 0."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = _ratio(tp, col)
    recall = _ratio(tp, row)
    f1 = _ratio(2 * precision * recall, precision + recall)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return EvalReport(precision, recall, f1, row, accuracy)


def fmt2(x: float) -> str:
    """Two decimals, ties to even on the shortest decimal repr (0.675 -> 0.68)."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def render_report(
    report: EvalReport,
    style: str = "tsv",
    registry: Registry = REGISTRY,
    full_precision: bool = False,
    labels: Sequence[int] | None = None,
) -> str:
    """One row per dialect in registry order plus an ``# accuracy=`` footer.

    ``labels`` restricts the rows to the given class indices.
    """
    fmt = (lambda x: repr(float(x))) if full_precision else fmt2
    idx = range(len(registry)) if labels is None else labels
    rows = [
        (registry.by_index(k).code, fmt(report.precision[k]), fmt(report.recall[k]), fmt(report.f1[k]),
         str(int(report.support[k])))
        for k in idx
    ]
    header = ("dialect", "precision", "recall", "f1", "support")
    footer = f"# accuracy={fmt(report.accuracy)}"
    if style == "tsv":
        lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    elif style == "table":
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        lines = [" ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    else:
        raise ValueError(f"unknown report style {style!r}")
    return "\n".join(lines + [footer]) + "\n"
