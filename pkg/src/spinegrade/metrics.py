"""Evaluation battery: accuracy, MAE, Cohen's kappa, one-vs-rest rates,
micro-averaging, ROC/AUC.

Rates with a zero denominator are reported as ``None`` (serialized as JSON
null) rather than silently coerced to 0, so averages over present levels are
never diluted by absent ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns predictions."""
    counts: np.ndarray

    @property
    def levels(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: Path) -> None:
        k = self.levels
        lines = ["truth\\pred," + ",".join(str(j + 1) for j in range(k))]
        for i in range(k):
            lines.append(f"{i + 1}," + ",".join(str(int(v)) for v in self.counts[i]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def confusion(y_true: Sequence[int], y_pred: Sequence[int], levels: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("empty label arrays")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.min() < 1 or arr.max() > levels:
            raise ValueError(f"{name} has labels outside [1, {levels}]")
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def mae(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty label arrays")
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    return float(np.abs(t - p).mean())


def _rate(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class LevelRates:
    recall: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    npv: Optional[float]


def one_vs_rest_counts(cm: ConfusionMatrix, level: int) -> tuple[int, int, int, int]:
    """(TP, FN, FP, TN) treating ``level`` (1-based) as positive."""
    i = level - 1
    c = cm.counts
    tp = int(c[i, i])
    fn = int(c[i].sum() - tp)
    fp = int(c[:, i].sum() - tp)
    tn = int(c.sum() - tp - fn - fp)
    return tp, fn, fp, tn


def one_vs_rest(cm: ConfusionMatrix, level: int) -> LevelRates:
    tp, fn, fp, tn = one_vs_rest_counts(cm, level)
    return LevelRates(_rate(tp, tp + fn), _rate(tn, tn + fp),
                      _rate(tp, tp + fp), _rate(tn, tn + fn))


def micro_average(cm: ConfusionMatrix) -> tuple[float, float]:
    """(recall, specificity) from TP/FN/FP/TN pooled across all levels."""
    tp = fn = fp = tn = 0
    for level in range(1, cm.levels + 1):
        a, b, c, d = one_vs_rest_counts(cm, level)
        tp += a
        fn += b
        fp += c
        tn += d
    return tp / (tp + fn), tn / (tn + fp)


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa; degenerate chance agreement (p_e == 1) maps to 1 for
    perfect observed agreement and 0 otherwise."""
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(cm.counts) / total
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    p_e = float((rows * cols).sum()) / (total * total)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


# ---------------------------------------------------------------------------
# ROC / AUC

@dataclass(frozen=True)
class RocCurve:
    points: list[tuple[float, float]]  # (FPR, TPR), sorted by threshold desc
    auc: float


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> RocCurve:
    """Threshold sweep over score midpoints (plus +/- infinity endpoints);
    equal scores share a threshold.  AUC by the trapezoid rule."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    uniq = np.unique(s)
    thresholds = np.concatenate(
        [[np.inf], (uniq[1:] + uniq[:-1]) / 2.0 if uniq.size > 1 else [], [-np.inf]])
    points = []
    for thr in sorted(thresholds, reverse=True):
        pred = s > thr
        tpr = float((pred & y).sum() / n_pos)
        fpr = float((pred & ~y).sum() / n_neg)
        points.append((fpr, tpr))
    area = 0.0
    for (f0, t0), (f1, t1) in zip(points[:-1], points[1:]):
        area += (f1 - f0) * (t1 + t0) / 2.0
    return RocCurve(points, float(area))


# ---------------------------------------------------------------------------
# aggregate report

@dataclass
class MetricsReport:
    acc: float
    mae: float
    kappa: float
    per_level: list[LevelRates]
    roc: list[Optional[RocCurve]]
    cm: ConfusionMatrix

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "mae": self.mae,
            "kappa": self.kappa,
            "levels": [{"re": r.recall, "sp": r.specificity,
                        "pr": r.precision, "npv": r.npv} for r in self.per_level],
            "roc": [None if r is None else
                    {"auc": r.auc, "points": [list(p) for p in r.points]}
                    for r in self.roc],
        }

    def to_json(self, path: Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def compute_report(y_true: Sequence[int], y_pred: Sequence[int], levels: int,
                   scores: np.ndarray | None = None) -> MetricsReport:
    """Full battery for one prediction set.

    ``scores`` is an optional (N, K) per-level score matrix; ROC entries for
    levels with a single class present are ``None``.
    """
    cm = confusion(y_true, y_pred, levels)
    rates = [one_vs_rest(cm, lvl) for lvl in range(1, levels + 1)]
    roc: list[Optional[RocCurve]] = []
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        t = np.asarray(y_true, dtype=np.int64)
        for lvl in range(1, levels + 1):
            is_pos = t == lvl
            if is_pos.all() or not is_pos.any():
                roc.append(None)
            else:
                roc.append(roc_auc(scores[:, lvl - 1], is_pos))
    else:
        roc = [None] * levels
    return MetricsReport(accuracy(cm), mae(y_true, y_pred), kappa(cm),
                         rates, roc, cm)
