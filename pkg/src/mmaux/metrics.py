"""Evaluation metrics: weighted F1, per-relation accuracy, seed aggregation, Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateTestError, InputError


def _as_labels(x, name) -> np.ndarray:
    arr = np.asarray(x, dtype=np.int64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-D label sequence")
    return arr


def _check_aligned(preds, golds):
    p, g = _as_labels(preds, "preds"), _as_labels(golds, "golds")
    if len(p) != len(g):
        raise InputError(f"length mismatch: {len(p)} predictions vs {len(g)} gold labels")
    if len(g) == 0:
        raise InputError("need at least one evaluated post")
    return p, g


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows gold, cols predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(preds, golds, num_classes: int | None = None) -> ConfusionMatrix:
    p, g = _check_aligned(preds, golds)
    k = max(int(p.max()), int(g.max())) + 1
    if num_classes is not None:
        if k > num_classes:
            raise InputError(f"label {k - 1} outside [0, {num_classes})")
        k = num_classes
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (g, p), 1)
    return ConfusionMatrix(counts)


def per_class_f1(preds, golds, num_classes: int | None = None) -> np.ndarray:
    cm = confusion_matrix(preds, golds, num_classes).counts
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    gold_pos = cm.sum(axis=1)
    # F1 = 2TP / (2TP + FP + FN); zero when the class is never predicted nor present
    denom = pred_pos + gold_pos
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1(preds, golds, num_classes: int | None = None) -> float:
    """Per-class F1 averaged with weights equal to gold-class support share."""
    p, g = _check_aligned(preds, golds)
    f1 = per_class_f1(p, g, num_classes)
    support = np.bincount(g, minlength=len(f1)).astype(np.float64)
    return float((f1 * support).sum() / support.sum())


@dataclass
class RelationBreakdown:
    accuracy: dict  # relation -> accuracy, only tags with support
    support: dict

    @property
    def total(self) -> int:
        return int(sum(self.support.values()))

    def overall_accuracy(self) -> float:
        correct = sum(self.accuracy[r] * self.support[r] for r in self.accuracy)
        return correct / self.total

    def to_json(self) -> dict:
        key = lambda r: getattr(r, "key", str(r))  # noqa: E731
        return {key(r): {"accuracy": self.accuracy[r], "support": self.support[r]} for r in sorted(self.accuracy)}


def accuracy_by_relation(preds, golds, relations: Sequence) -> RelationBreakdown:
    p, g = _check_aligned(preds, golds)
    if len(relations) != len(g):
        raise InputError(f"length mismatch: {len(relations)} relation tags vs {len(g)} posts")
    correct: dict = {}
    support: dict = {}
    for pred, gold, rel in zip(p, g, relations):
        support[rel] = support.get(rel, 0) + 1
        correct[rel] = correct.get(rel, 0) + int(pred == gold)
    return RelationBreakdown({r: correct[r] / support[r] for r in support}, support)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """(mean, sample standard deviation); std is exactly 0 for one value or all-equal values."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise InputError("cannot aggregate an empty list")
    mean = float(vals.mean())
    if vals.size == 1 or np.all(vals == vals[0]):
        return float(vals[0]), 0.0
    return mean, float(vals.std(ddof=1))


# ---------------------------------------------------------------------------
# Student t distribution via the regularized incomplete beta function


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t(df)."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, betainc_regularized(df / 2.0, 0.5, x))


def student_t_cdf(t: float, df: float) -> float:
    half = 0.5 * student_t_sf_two_sided(t, df)
    return 1.0 - half if t >= 0 else half


@dataclass
class TTestResult:
    t: float
    df: float
    p: float

    def __iter__(self):
        return iter((self.t, self.df, self.p))


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sample unequal-variance t-test with Welch–Satterthwaite df, two-sided p."""
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if xa.size < 2 or xb.size < 2:
        raise DegenerateTestError("each sample needs at least 2 values")
    va = xa.var(ddof=1) / xa.size
    vb = xb.var(ddof=1) / xb.size
    if va == 0.0 and vb == 0.0:
        raise DegenerateTestError("both samples have zero variance")
    se2 = va + vb
    t = float((xa.mean() - xb.mean()) / math.sqrt(se2))
    df = float(se2 * se2 / (va * va / (xa.size - 1) + vb * vb / (xb.size - 1)))
    return TTestResult(t=t, df=df, p=student_t_sf_two_sided(t, df))
