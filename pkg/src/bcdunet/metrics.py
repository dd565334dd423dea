"""Segmentation evaluation: confusion-based scores, ROC curve, and AUC.

All functions are pure. Pixel counts are pooled over whatever arrays are
passed in (micro-averaging); ``evaluate_pairs`` offers per-image averaging
behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, UsageError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    jaccard: float
    auc: float | None = None
    roc: list[tuple[float, float]] | None = None
    degenerate: tuple[str, ...] = ()


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_binary(target: np.ndarray) -> np.ndarray:
    t = _values(target)
    if not np.isin(t, (0, 1)).all():
        bad = t[~np.isin(t, (0, 1))].flat[0]
        raise UsageError(f"target must be binary (0/1), found value {bad}")
    return t


def confusion(pred_prob, target, threshold: float = 0.5) -> ConfusionCounts:
    """Tally pixels after binarizing predictions at ``threshold`` (>= is positive)."""
    p = _values(pred_prob)
    t = _check_binary(target)
    if p.shape != t.shape:
        raise UsageError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    pos = p >= threshold
    truth = t == 1
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    tn = int(np.count_nonzero(~pos & ~truth))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def derive(counts: ConfusionCounts) -> MetricsReport:
    """Accuracy, sensitivity, specificity, precision, F1, Jaccard from counts.

    Zero denominators yield 0 and record the metric name in ``degenerate``
    instead of raising, so batch aggregation stays total-order safe.
    """
    if counts.total <= 0:
        raise UsageError("confusion counts are empty")
    flags: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    accuracy = (tp + tn) / counts.total
    sensitivity = ratio(tp, tp + fn, "sensitivity")
    specificity = ratio(tn, tn + fp, "specificity")
    precision = ratio(tp, tp + fp, "precision")
    if precision + sensitivity > 0:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    else:
        flags.append("f1")
        f1 = 0.0
    jaccard = ratio(tp, tp + fp + fn, "jaccard")
    return MetricsReport(
        accuracy=accuracy, sensitivity=sensitivity, specificity=specificity,
        precision=precision, f1=f1, jaccard=jaccard, degenerate=tuple(flags))


def roc_auc(pred_prob, target) -> tuple[list[tuple[float, float]], float]:
    """ROC points swept over distinct scores plus trapezoidal AUC.

    Equal scores move along the curve as one group, so the trapezoid rule
    credits ties with 1/2, matching the Mann-Whitney pair statistic.
    """
    s = _values(pred_prob).ravel().astype(np.float64)
    t = _check_binary(target).ravel()
    if s.shape != t.shape:
        raise UsageError(f"score count {s.size} does not match target count {t.size}")
    npos = int(np.count_nonzero(t == 1))
    nneg = t.size - npos
    if npos == 0:
        raise UsageError("ROC needs at least one positive pixel; target has none")
    if nneg == 0:
        raise UsageError("ROC needs at least one negative pixel; target has none")
    order = np.argsort(-s, kind="stable")
    labels = t[order]
    scores = s[order]
    # group boundaries where the sorted score changes
    boundary = np.nonzero(np.diff(scores))[0]
    cum_tp = np.cumsum(labels == 1)
    cum_fp = np.cumsum(labels == 0)
    ends = np.append(boundary, scores.size - 1)
    tpr = np.concatenate(([0.0], cum_tp[ends] / npos))
    fpr = np.concatenate(([0.0], cum_fp[ends] / nneg))
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def full_report(pred_prob, target, threshold: float = 0.5) -> MetricsReport:
    report = derive(confusion(pred_prob, target, threshold))
    report.roc, report.auc = roc_auc(pred_prob, target)
    return report


def evaluate_pairs(preds: list, targets: list, threshold: float = 0.5,
                   per_image: bool = False) -> MetricsReport:
    """Pooled (micro-averaged) metrics over a set; per-image means behind a flag."""
    if len(preds) != len(targets) or not preds:
        raise UsageError("need equal non-zero numbers of predictions and targets")
    if not per_image:
        p = np.concatenate([_values(x).ravel() for x in preds])
        t = np.concatenate([_values(x).ravel() for x in targets])
        return full_report(p, t, threshold)
    reports = [derive(confusion(p, t, threshold)) for p, t in zip(preds, targets)]
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
    return MetricsReport(
        accuracy=mean("accuracy"), sensitivity=mean("sensitivity"),
        specificity=mean("specificity"), precision=mean("precision"),
        f1=mean("f1"), jaccard=mean("jaccard"),
        degenerate=tuple(sorted({f for r in reports for f in r.degenerate})))


def format_report(report: MetricsReport) -> str:
    """Key-value text block matching the usual result-table columns."""
    lines = [
        f"accuracy {report.accuracy:.6f}",
        f"sensitivity {report.sensitivity:.6f}",
        f"specificity {report.specificity:.6f}",
        f"precision {report.precision:.6f}",
        f"f1 {report.f1:.6f}",
        f"jaccard {report.jaccard:.6f}",
    ]
    if report.auc is not None:
        lines.append(f"auc {report.auc:.6f}")
    if report.degenerate:
        lines.append("degenerate " + ",".join(report.degenerate))
    return "\n".join(lines)


def write_roc(path, roc: list[tuple[float, float]]) -> None:
    """Two-column numeric file (fpr tpr), one point per line."""
    with open(path, "w") as f:
        for fpr, tpr in roc:
            f.write(f"{fpr:.10g} {tpr:.10g}\n")
