"""Confusion matrix, per-class and aggregate scores, one-vs-rest ROC, malignancy audit."""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import BENIGN, MALIGNANT, SUBCLASSES, main_class_of
from .errors import InputError


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    labels: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return len(self.labels)

    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0


def _labels(num_classes, class_labels):
    if class_labels is None:
        return SUBCLASSES if num_classes == len(SUBCLASSES) else tuple(range(num_classes))
    if len(class_labels) != num_classes:
        raise InputError(f"{len(class_labels)} class labels for {num_classes} classes")
    return tuple(class_labels)


def confusion(true_labels, predicted_labels, num_classes, class_labels=None):
    y_true = np.asarray(true_labels)
    y_pred = np.asarray(predicted_labels)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise InputError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    for arr, name in ((y_true, "true"), (y_pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} label out of range [0, {num_classes})")
    counts = np.bincount(y_true.astype(np.int64) * num_classes + y_pred.astype(np.int64),
                         minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts, _labels(num_classes, class_labels))


@dataclass
class MetricsTable:
    labels: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: np.ndarray  # one-vs-rest (TP + TN) / total
    support: np.ndarray
    precision_undefined: np.ndarray
    recall_undefined: np.ndarray
    overall_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float

    def row(self, label):
        k = self.labels.index(label)
        return {"precision": float(self.precision[k]), "recall": float(self.recall[k]),
                "f1": float(self.f1[k]), "accuracy": float(self.accuracy[k]),
                "support": int(self.support[k])}


def _safe_ratio(num, den):
    den = np.asarray(den, dtype=float)
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros_like(den), where=~undefined)
    return out, undefined


def per_class_metrics(cm):
    """Per-class precision/recall/F1/accuracy with macro and micro aggregates.

    A zero denominator yields 0 and sets the matching ``*_undefined`` flag.
    """
    counts = np.asarray(cm.counts, dtype=float)
    total = counts.sum()
    if total == 0:
        raise InputError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision, p_undef = _safe_ratio(tp, tp + fp)
    recall, r_undef = _safe_ratio(tp, tp + fn)
    f1, _ = _safe_ratio(2 * precision * recall, precision + recall)
    micro_p = tp.sum() / (tp.sum() + fp.sum())
    micro_r = tp.sum() / (tp.sum() + fn.sum())
    micro_f1 = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return MetricsTable(
        labels=cm.labels, precision=precision, recall=recall, f1=f1,
        accuracy=(tp + tn) / total, support=counts.sum(axis=1).astype(int),
        precision_undefined=p_undef, recall_undefined=r_undef,
        overall_accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()), macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        micro_precision=float(micro_p), micro_recall=float(micro_r), micro_f1=float(micro_f1),
    )


@dataclass
class RocCurve:
    labels: tuple
    fpr: dict  # class index -> array, ordered by decreasing threshold
    tpr: dict
    thresholds: dict
    auc: dict  # trapezoid area
    auc_rank: dict  # rank-statistic area, the cross-check
    absent: tuple  # classes without positives or negatives in the truth
    macro_auc: float


def roc_curve_binary(is_positive, scores):
    """(fpr, tpr, thresholds) sweeping every distinct score from high to low, from (0, 0)."""
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], is_positive[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(pos)[last_of_run]
    fp = np.cumsum(~pos)[last_of_run]
    n_pos, n_neg = pos.sum(), (~pos).sum()
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    return fpr, tpr, thresholds


def trapezoid_area(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def rank_auc(is_positive, scores):
    """Mann-Whitney estimate with average ranks (ties count half)."""
    is_positive = np.asarray(is_positive, dtype=bool)
    ranks = rankdata(scores)
    n_pos, n_neg = is_positive.sum(), (~is_positive).sum()
    return float((ranks[is_positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(true_labels, scores, class_labels=None):
    """One-vs-rest ROC per class; macro AUC averages the classes that are defined."""
    y = np.asarray(true_labels)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] != y.shape[0]:
        raise InputError(f"scores must be (samples, classes); got {scores.shape} for {y.shape[0]} labels")
    num_classes = scores.shape[1]
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    fprs, tprs, ths, aucs, ranks, absent = {}, {}, {}, {}, {}, []
    for k in range(num_classes):
        positive = y == k
        if positive.all() or not positive.any():
            absent.append(k)
            continue
        fpr, tpr, th = roc_curve_binary(positive, scores[:, k])
        fprs[k], tprs[k], ths[k] = fpr, tpr, th
        aucs[k] = trapezoid_area(fpr, tpr)
        ranks[k] = rank_auc(positive, scores[:, k])
    macro = float(np.mean(list(aucs.values()))) if aucs else float("nan")
    return RocCurve(_labels(num_classes, class_labels), fprs, tprs, ths, aucs, ranks, tuple(absent), macro)


@dataclass
class MisclassAudit:
    errors: list = field(default_factory=list)  # (sample_id, true subclass, predicted subclass)
    malignant_as_benign: int = 0
    benign_as_malignant: int = 0

    @property
    def count(self):
        return len(self.errors)


def malignancy_audit(records, predictions):
    """List subclass-level errors and count cross-category mistakes.

    ``predictions`` holds subclass names or indices into the subclass list.
    """
    records = list(records)
    predictions = list(predictions)
    if len(records) != len(predictions):
        raise InputError(f"{len(records)} records but {len(predictions)} predictions")
    audit = MisclassAudit()
    for rec, pred in zip(records, predictions):
        pred = SUBCLASSES[int(pred)] if not isinstance(pred, str) else pred
        if pred not in SUBCLASSES:
            raise InputError(f"unknown predicted subclass {pred!r}")
        if pred == rec.subclass:
            continue
        audit.errors.append((rec.sample_id, rec.subclass, pred))
        truth, guess = rec.main_class, main_class_of(pred)
        if truth == "malignant" and guess == "benign":
            audit.malignant_as_benign += 1
        elif truth == "benign" and guess == "malignant":
            audit.benign_as_malignant += 1
    return audit


def cross_category_counts(cm):
    """Off-block sums of an 8-class matrix: (malignant->benign, benign->malignant)."""
    idx = {s: i for i, s in enumerate(cm.labels)}
    b = [idx[s] for s in BENIGN]
    m = [idx[s] for s in MALIGNANT]
    return int(cm.counts[np.ix_(m, b)].sum()), int(cm.counts[np.ix_(b, m)].sum())


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    metrics: MetricsTable
    roc: RocCurve
    audit: MisclassAudit = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        m, roc = self.metrics, self.roc
        labels = [str(lbl) for lbl in m.labels]
        per_class = {
            lbl: {
                "precision": float(m.precision[k]), "recall": float(m.recall[k]),
                "f1": float(m.f1[k]), "accuracy": float(m.accuracy[k]), "support": int(m.support[k]),
                "precision_undefined": bool(m.precision_undefined[k]),
                "recall_undefined": bool(m.recall_undefined[k]),
                "auc": roc.auc.get(k),
            }
            for k, lbl in enumerate(labels)
        }
        out = {
            "metadata": {
                "aggregate": "macro (unweighted mean over classes); micro also reported",
                "per_class_accuracy": "one-vs-rest (TP + TN) / total",
                "zero_division": "0, flagged",
                "roc": "one-vs-rest, trapezoid area; ties half-credited",
                **self.metadata,
            },
            "num_samples": self.confusion.total,
            "accuracy": m.overall_accuracy,
            "macro": {"precision": m.macro_precision, "recall": m.macro_recall, "f1": m.macro_f1},
            "micro": {"precision": m.micro_precision, "recall": m.micro_recall, "f1": m.micro_f1},
            "per_class": per_class,
            "confusion_matrix": {"labels": labels, "counts": self.confusion.counts.tolist()},
            "roc": {
                "macro_auc": roc.macro_auc,
                "absent_classes": [labels[k] for k in roc.absent],
                "curves": {labels[k]: {"fpr": roc.fpr[k].tolist(), "tpr": roc.tpr[k].tolist()}
                           for k in roc.fpr},
            },
        }
        if self.audit is not None:
            out["audit"] = {
                "malignant_as_benign": self.audit.malignant_as_benign,
                "benign_as_malignant": self.audit.benign_as_malignant,
                "errors": [list(e) for e in self.audit.errors],
            }
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        m = self.metrics
        lines = [f"samples {self.confusion.total}  accuracy {m.overall_accuracy:.4f}  "
                 f"macro P {m.macro_precision:.4f} R {m.macro_recall:.4f} F1 {m.macro_f1:.4f}  "
                 f"macro AUC {self.roc.macro_auc:.4f}",
                 "",
                 f"{'class':<6}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}{'auc':>8}{'n':>6}"]
        for k, lbl in enumerate(m.labels):
            auc = self.roc.auc.get(k)
            auc_s = f"{auc:8.4f}" if auc is not None else f"{'-':>8}"
            flag = "*" if m.precision_undefined[k] or m.recall_undefined[k] else ""
            lines.append(f"{str(lbl):<6}{m.accuracy[k]:8.4f}{m.precision[k]:8.4f}{m.recall[k]:8.4f}"
                         f"{m.f1[k]:8.4f}{auc_s}{m.support[k]:6d}{flag}")
        lines += ["", "confusion (rows true, cols predicted)",
                  "      " + "".join(f"{str(lbl):>6}" for lbl in m.labels)]
        for lbl, row in zip(m.labels, self.confusion.counts):
            lines.append(f"{str(lbl):<6}" + "".join(f"{int(v):6d}" for v in row))
        if self.audit is not None:
            lines += ["", f"malignant predicted benign: {self.audit.malignant_as_benign}",
                      f"benign predicted malignant: {self.audit.benign_as_malignant}"]
        return "\n".join(lines) + "\n"


def evaluate(true_labels, probs, class_labels=None, records=None, metadata=None):
    """Full report from per-sample class probabilities (arg-max decides the prediction)."""
    from .ensemble import argmax_lowest

    probs = np.asarray(probs, dtype=float)
    num_classes = probs.shape[1]
    predicted = np.array([argmax_lowest(p)[0] for p in probs], dtype=np.int64)
    cm = confusion(true_labels, predicted, num_classes, class_labels)
    audit = None
    if records is not None and tuple(cm.labels) == SUBCLASSES:
        audit = malignancy_audit(records, predicted)
    return EvalReport(cm, per_class_metrics(cm), roc_auc(true_labels, probs, cm.labels), audit,
                      dict(metadata or {}))


def plot_roc(roc, path, title="One-vs-rest ROC"):
    """Render the curves to an image file with fixed metadata so reruns are byte-identical."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for k in roc.fpr:
        ax.plot(roc.fpr[k], roc.tpr[k], label=f"{roc.labels[k]} (AUC {roc.auc[k]:.3f})")
    ax.plot([0, 1], [0, 1], color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"{title} (macro AUC {roc.macro_auc:.3f})")
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
