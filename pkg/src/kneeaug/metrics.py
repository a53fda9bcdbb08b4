"""Confusion matrices, per-class/macro figures of merit and one-vs-all ROC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 5


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class LabelOutOfRange(MetricsError):
    pass


class EmptyMatrix(MetricsError):
    pass


class DegenerateClass(MetricsError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def row_normalized(self):
        """Rows divided by their support; rows without support stay zero."""
        support = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        np.divide(self.counts, support, out=out, where=support > 0)
        return out

    def to_csv(self, normalized=False):
        data = self.row_normalized() if normalized else self.counts
        k = self.n_classes
        lines = ["true\\pred," + ",".join(f"KL{j}" for j in range(k))]
        for i in range(k):
            cells = [f"{v:.6f}" if normalized else str(int(v)) for v in data[i]]
            lines.append(f"KL{i}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def confusion(true_labels, predicted, n_classes=N_CLASSES) -> ConfusionMatrix:
    y = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted, dtype=np.int64).ravel()
    if y.shape != p.shape:
        raise LengthMismatch(f"{y.size} true labels vs {p.size} predictions")
    for arr, what in ((y, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"{what} labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassScores:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float


@dataclass
class Scores:
    per_class: list
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str = "macro"


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def prf1(cm: ConfusionMatrix) -> Scores:
    """One-vs-all TP/FP/FN/TN per class, then macro averages.

    Overall accuracy is the trace over the total. Classes that never occur in
    either the labels or the predictions are left out of the macro means.
    """
    c = np.asarray(cm.counts, dtype=np.int64)
    total = int(c.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    per_class = []
    present = []
    for k in range(c.shape[0]):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        tn = total - tp - fp - fn
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class.append(ClassScores(tp, fp, fn, tn, precision, recall, f1, (tp + tn) / total))
        present.append(tp + fp + fn > 0)
    used = [s for s, keep in zip(per_class, present) if keep]
    return Scores(
        per_class=per_class,
        accuracy=float(np.trace(c)) / total,
        precision=float(np.mean([s.precision for s in used])),
        recall=float(np.mean([s.recall for s in used])),
        f1=float(np.mean([s.f1 for s in used])),
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self):
        lines = ["threshold,fpr,tpr"]
        for t, f, r in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{t:.8f},{f:.8f},{r:.8f}")
        return "\n".join(lines) + "\n"


def roc_curve(scores, is_positive) -> RocCurve:
    """Threshold sweep from high to low score; tied scores move together."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(is_positive, dtype=bool).ravel()
    if s.shape != pos.shape:
        raise LengthMismatch("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # last index of every block of equal scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def roc_one_vs_all(scores, true_labels, positive_class) -> RocCurve:
    """ROC of one class against the rest, using that class's score column."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64).ravel()
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise LengthMismatch("scores must be (n_samples, n_classes) matching the labels")
    return roc_curve(scores[:, positive_class], labels == positive_class)


def metrics_row(condition: str, scores: Scores) -> str:
    return f"{condition},{scores.accuracy:.6f},{scores.precision:.6f},{scores.recall:.6f},{scores.f1:.6f}"


METRICS_HEADER = "condition,accuracy,precision,recall,f1"


def per_class_csv(scores: Scores) -> str:
    lines = ["class,tp,fp,fn,tn,precision,recall,f1,accuracy"]
    for k, s in enumerate(scores.per_class):
        lines.append(f"KL{k},{s.tp},{s.fp},{s.fn},{s.tn},{s.precision:.6f},{s.recall:.6f},{s.f1:.6f},"
                     f"{s.accuracy:.6f}")
    return "\n".join(lines) + "\n"
