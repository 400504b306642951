"""Binary classification metrics and cross-fold paired statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    degenerate: tuple = ()


def confusion(preds, labels) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionError(f"preds {preds.shape} and labels {labels.shape} "
                             "must be equal-length vectors")
    for name, v in (("preds", preds), ("labels", labels)):
        if not np.isin(v, (0, 1)).all():
            raise ContractError(f"{name} must be binary")
    return ConfusionMatrix(
        tn=int(((preds == 0) & (labels == 0)).sum()),
        fp=int(((preds == 1) & (labels == 0)).sum()),
        fn=int(((preds == 0) & (labels == 1)).sum()),
        tp=int(((preds == 1) & (labels == 1)).sum()),
    )


def basic_metrics(cm: ConfusionMatrix):
    """(accuracy, precision, recall, f1, degenerate) with zero-denominator
    metrics reported as 0 and named in the degenerate tuple."""
    total = cm.total()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    degenerate = []
    accuracy = (cm.tp + cm.tn) / total
    if cm.tp + cm.fp > 0:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if cm.tp + cm.fn > 0:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return accuracy, precision, recall, f1, tuple(degenerate)


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} "
                             "must be equal-length vectors")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("AUC is undefined with a single class present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def report(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Full report from class-1 scores; a score tied at the threshold
    predicts class 0."""
    scores = np.asarray(scores, dtype=np.float64)
    preds = (scores > threshold).astype(np.int64)
    cm = confusion(preds, labels)
    accuracy, precision, recall, f1, degenerate = basic_metrics(cm)
    return MetricsReport(confusion=cm, accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, roc_auc=roc_auc(scores, labels),
                         degenerate=degenerate)


def mean_std(values):
    """(mean, sample standard deviation with the n-1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ContractError(f"need at least 2 values, got {values.size}")
    return float(values.mean()), float(values.std(ddof=1))


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz evaluation of the incomplete-beta continued fraction."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-15:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge "
                          f"for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to well below 1e-10 over the t-test range."""
    if a <= 0 or b <= 0:
        raise ContractError(f"shape parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (a * math.log(x) + b * math.log1p(-x)
                + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b))
    front = math.exp(ln_front)
    # The continued fraction converges fast only on one side of the mean;
    # use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) for the other.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: int) -> float:
    """CDF of Student's t via the regularized incomplete beta."""
    if df < 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def paired_t_one_sided(baseline, proposed):
    """One-sided paired t-test of proposed > baseline; returns (t, p).

    Zero-variance differences fall back to limit conventions: p = 0 when
    the mean difference is positive, 1 when negative, 0.5 when zero.
    """
    baseline = np.asarray(baseline, dtype=np.float64)
    proposed = np.asarray(proposed, dtype=np.float64)
    if baseline.shape != proposed.shape or baseline.ndim != 1:
        raise DimensionError(f"baseline {baseline.shape} and proposed {proposed.shape} "
                             "must be equal-length vectors")
    n = baseline.size
    if n < 2:
        raise ContractError(f"need at least 2 pairs, got {n}")
    d = proposed - baseline
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean > 0:
            return float("inf"), 0.0
        if mean < 0:
            return float("-inf"), 1.0
        return 0.0, 0.5
    t = mean / (sd / math.sqrt(n))
    return float(t), 1.0 - student_t_cdf(t, n - 1)


def write_reports_csv(path, rows) -> None:
    """rows: iterable of (fold, split, MetricsReport)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "split", "accuracy", "precision", "recall", "f1", "auc"])
        for fold, split, rep in rows:
            writer.writerow([fold, split, f"{rep.accuracy:.6f}", f"{rep.precision:.6f}",
                             f"{rep.recall:.6f}", f"{rep.f1:.6f}", f"{rep.roc_auc:.6f}"])


def confusion_grid(cm: ConfusionMatrix) -> str:
    """Text rendering, actual class per row, predicted per column."""
    rows = [
        "              pred 0   pred 1",
        f"actual 0    {cm.tn:8d} {cm.fp:8d}",
        f"actual 1    {cm.fn:8d} {cm.tp:8d}",
    ]
    return "\n".join(rows) + "\n"


def write_confusion_csv(path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["", "pred_0", "pred_1"])
        writer.writerow(["actual_0", cm.tn, cm.fp])
        writer.writerow(["actual_1", cm.fn, cm.tp])
