"""Binary classification metrics, ROC/AUC and step-wise average precision.

Zero-denominator convention: precision, recall and F1 are reported as 0 when
their formula divides by zero.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ContractError


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary(v, name: str) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim != 1:
        raise ContractError(f"{name} must be a vector, got shape {a.shape}")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ContractError(f"{name} must contain only 0/1")
    return a.astype(np.int64)


def confusion(y_true, y_pred) -> Confusion:
    t = _binary(y_true, "y_true")
    p = _binary(y_pred, "y_pred")
    if t.size != p.size:
        raise ContractError(f"confusion: length mismatch {t.size} vs {p.size}")
    if t.size == 0:
        raise ContractError("confusion: empty input")
    tp = int(np.sum((t == 1) & (p == 1)))
    tn = int(np.sum((t == 0) & (p == 0)))
    fp = int(np.sum((t == 0) & (p == 1)))
    fn = int(np.sum((t == 1) & (p == 0)))
    return Confusion(tp, tn, fp, fn)


def accuracy(c: Confusion) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: Confusion) -> float:
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: Confusion) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def roc_curve(y_true, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), sweeping every distinct score with ``score >= t``.

    The first point is (0, 0) at threshold +inf. Classes absent from
    ``y_true`` give a rate of 0 throughout for that axis, except the final
    point which is pinned to (1, 1).
    """
    t = _binary(y_true, "y_true")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != t.shape:
        raise ContractError(f"roc_curve: {t.size} labels vs {s.size} scores")
    if t.size == 0:
        raise ContractError("roc_curve: empty input")
    if not np.isfinite(s).all():
        raise ContractError("roc_curve: scores must be finite")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    t_sorted = t[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(t_sorted)[ends]
    fps = np.cumsum(1 - t_sorted)[ends]
    n_pos, n_neg = int(t.sum()), int(t.size - t.sum())
    tpr = np.r_[0.0, tps / n_pos if n_pos else np.zeros(len(ends))]
    fpr = np.r_[0.0, fps / n_neg if n_neg else np.zeros(len(ends))]
    tpr[-1], fpr[-1] = 1.0, 1.0
    return fpr, tpr, np.r_[np.inf, s_sorted[ends]]


def auc_trapezoid(fpr, tpr) -> float:
    fpr = np.asarray(fpr)
    tpr = np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(y_true, scores) -> float:
    """Sum over thresholds of (recall increment) * precision, no interpolation."""
    t = _binary(y_true, "y_true")
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(t.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-s, kind="mergesort")
    s_sorted, t_sorted = s[order], t[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(t_sorted)[ends].astype(np.float64)
    predicted = ends + 1.0
    prec = tps / predicted
    rec = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


def tpr_at(fpr, tpr, grid) -> np.ndarray:
    """Best TPR reachable without exceeding each FPR in ``grid`` (step reading of the ROC)."""
    fpr = np.asarray(fpr)
    tpr = np.asarray(tpr)
    idx = np.searchsorted(fpr, np.asarray(grid), side="right") - 1
    return np.maximum.accumulate(tpr)[idx]


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    ap: float
    threshold: float
    confusion: Confusion
    roc_fpr: list[float] = field(default_factory=list)
    roc_tpr: list[float] = field(default_factory=list)
    roc_thresholds: list[float] = field(default_factory=list)

    @property
    def roc(self) -> list[tuple[float, float]]:
        return list(zip(self.roc_fpr, self.roc_tpr))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        d["roc_thresholds"] = [None if not np.isfinite(x) else x for x in self.roc_thresholds]
        d["conventions"] = {
            "zero_denominator": "precision, recall, f1 are 0 when undefined",
            "ap": "positive-class step-wise average precision, non-interpolated",
            "auc": "trapezoidal area under ROC swept over distinct scores, ties at score >= threshold",
        }
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for th, f, t in zip(self.roc_thresholds, self.roc_fpr, self.roc_tpr):
                w.writerow(["inf" if not np.isfinite(th) else repr(float(th)), repr(float(f)), repr(float(t))])


def scores_to_report(y_true, scores, threshold: float = 0.5) -> MetricReport:
    s = np.asarray(scores, dtype=np.float64)
    t = _binary(y_true, "y_true")
    if t.size == 0:
        raise ContractError("scores_to_report: empty input")
    if not np.isfinite(s).all():
        raise ContractError("scores_to_report: scores must be finite")
    c = confusion(t, (s >= threshold).astype(np.int64))
    p, r = precision(c), recall(c)
    fpr, tpr, th = roc_curve(t, s)
    return MetricReport(
        accuracy=accuracy(c), precision=p, recall=r, f1=f1_score(p, r),
        auc=auc_trapezoid(fpr, tpr), ap=average_precision(t, s), threshold=threshold,
        confusion=c, roc_fpr=fpr.tolist(), roc_tpr=tpr.tolist(), roc_thresholds=th.tolist(),
    )
