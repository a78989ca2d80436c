"""Binary classification metrics built from scratch.

AUC is defined by pair counting (Mann-Whitney, ties count one half); the
trapezoidal area under :func:`roc_curve` is an independent cross-check.
Undefined quantities raise :class:`UndefinedMetricError` instead of
defaulting to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf first, then distinct scores descending

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def to_csv(self) -> str:
        lines = ["fpr,tpr"]
        lines += [f"{x!r},{y!r}" for x, y in self.points]
        return "\n".join(lines) + "\n"


def _inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.size == 0:
        raise ValueError("metrics need at least one sample")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise DomainError("scores contain NaN")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Counts with the rule: predict positive iff ``score >= threshold``."""
    s, y = _inputs(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n == 0:
        raise UndefinedMetricError("accuracy", "no samples")
    return (cm.tp + cm.tn) / cm.n


def precision(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision", "no positive predictions (tp + fp = 0)")
    return cm.tp / (cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("recall", "no positive labels (tp + fn = 0)")
    return cm.tp / (cm.tp + cm.fn)


def precision_recall(cm: ConfusionMatrix) -> Tuple[float, float]:
    return precision(cm), recall(cm)


def _tie_groups(s, y):
    """Distinct scores ascending with positive/negative counts at each."""
    values, inverse = np.unique(s, return_inverse=True)
    pos = np.bincount(inverse, weights=y, minlength=len(values)).astype(np.int64)
    tot = np.bincount(inverse, minlength=len(values)).astype(np.int64)
    return values, pos, tot - pos


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), over all positive/negative pairs."""
    s, y = _inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc", "needs at least one positive and one negative label")
    _, pos, neg = _tie_groups(s, y)
    neg_below = np.concatenate(([0], np.cumsum(neg)[:-1]))
    # doubled to keep the tie half-credit in exact integer arithmetic
    twice_wins = int(np.sum(pos * (2 * neg_below + neg)))
    return twice_wins / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score (descending), preceded by (0, 0)."""
    s, y = _inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_curve", "needs both classes")
    values, pos, neg = _tie_groups(s, y)
    tp = np.concatenate(([0], np.cumsum(pos[::-1])))
    fp = np.concatenate(([0], np.cumsum(neg[::-1])))
    thresholds = np.concatenate(([np.inf], values[::-1]))
    return RocCurve(fp / n_neg, tp / n_pos, thresholds)


@dataclass
class EvalReport:
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    auc: Optional[float]
    confusion: ConfusionMatrix
    threshold: float
    n: int
    subgroup_reports: Optional[Dict[str, "EvalReport"]] = None
    disparity: Optional[float] = None
    model: Optional[str] = None

    def as_dict(self) -> dict:
        d = {
            "model": self.model,
            "n": self.n,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "auc": self.auc,
            "confusion": self.confusion.as_dict(),
        }
        if self.subgroup_reports is not None:
            d["subgroups"] = {k: v.as_dict() for k, v in sorted(self.subgroup_reports.items())}
            d["disparity"] = self.disparity
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        subs = d.get("subgroups")
        return cls(
            accuracy=float(d["accuracy"]),
            precision=d.get("precision"),
            recall=d.get("recall"),
            auc=d.get("auc"),
            confusion=ConfusionMatrix(**d["confusion"]),
            threshold=float(d["threshold"]),
            n=int(d["n"]),
            subgroup_reports={k: cls.from_dict(v) for k, v in subs.items()} if subs else None,
            disparity=d.get("disparity"),
            model=d.get("model"),
        )


def _lenient(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(scores, labels, threshold: float = DEFAULT_THRESHOLD, *, strict: bool = True,
             groups: Optional[Sequence] = None, model: Optional[str] = None) -> EvalReport:
    """Full report. With ``strict`` any undefined metric raises; otherwise it is None."""
    s, y = _inputs(scores, labels)
    cm = confusion(s, y, threshold)
    if strict:
        prec, rec, area = precision(cm), recall(cm), auc(s, y)
    else:
        prec, rec, area = _lenient(precision, cm), _lenient(recall, cm), _lenient(auc, s, y)
    report = EvalReport(accuracy(cm), prec, rec, area, cm, float(threshold), int(s.size), model=model)
    if groups is not None:
        report.subgroup_reports, report.disparity = subgroup_disparity(s, y, groups, threshold)
    return report


def subgroup_disparity(scores, labels, groups, threshold: float = DEFAULT_THRESHOLD):
    """Per-group reports (lenient) and the max-min accuracy gap across groups."""
    s, y = _inputs(scores, labels)
    g = np.asarray([str(v) for v in groups])
    if g.shape != s.shape:
        raise ShapeError(f"{g.shape[0]} group values vs {s.shape[0]} samples")
    reports = {}
    for value in sorted(set(g.tolist())):
        mask = g == value
        reports[value] = evaluate(s[mask], y[mask], threshold, strict=False)
    accs = [r.accuracy for r in reports.values()]
    return reports, float(max(accs) - min(accs))
