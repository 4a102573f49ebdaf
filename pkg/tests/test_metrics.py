import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_class_metrics, brute_confusion, pair_count_auc
from vitdeit.data import SUBCLASSES, SampleRecord
from vitdeit.errors import InputError
from vitdeit.metrics import (confusion, cross_category_counts, evaluate, malignancy_audit,
                             per_class_metrics, plot_roc, roc_auc, roc_curve_binary)

seeds = st.integers(0, 2**31).map(np.random.default_rng)


def test_confusion_hand_count():
    cm = confusion([0, 0, 1], [0, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 1]]
    assert cm.total == 3 and cm.accuracy() == pytest.approx(2 / 3)


def test_confusion_errors():
    with pytest.raises(InputError):
        confusion([0, 1], [0], 2)
    with pytest.raises(InputError):
        confusion([0, 2], [0, 1], 2)
    with pytest.raises(InputError):
        confusion([0, 1], [0, 1], 2, class_labels=("a",))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_matches_counting_oracle(rng):
    n = int(rng.integers(1, 200))
    y, p = rng.integers(0, 8, n), rng.integers(0, 8, n)
    if rng.uniform() < 0.3:  # leave some classes unpredicted
        p = np.minimum(p, 5)
    cm = confusion(y, p, 8)
    assert np.array_equal(cm.counts, brute_confusion(y.tolist(), p.tolist(), 8))
    table = per_class_metrics(cm)
    for k, (prec, rec, f1, acc) in enumerate(brute_class_metrics(y.tolist(), p.tolist(), 8)):
        assert table.precision[k] == prec and table.recall[k] == rec
        assert abs(table.f1[k] - f1) < 1e-15 and abs(table.accuracy[k] - acc) < 1e-15
    assert cm.total == n
    assert abs(table.overall_accuracy - np.trace(cm.counts) / n) < 1e-12
    for k in range(8):
        lo, hi = sorted((table.precision[k], table.recall[k]))
        assert lo - 1e-15 <= table.f1[k] <= hi + 1e-15


def test_perfect_and_degenerate_tables():
    table = per_class_metrics(confusion([0, 1, 2, 2], [0, 1, 2, 2], 3))
    assert np.all(table.precision == 1) and np.all(table.recall == 1) and np.all(table.f1 == 1)
    assert table.macro_f1 == 1.0
    table = per_class_metrics(confusion([0, 1, 2], [0, 0, 0], 3))
    assert table.precision[1] == 0 and table.precision_undefined[1]
    assert table.recall[1] == 0 and not table.recall_undefined[1]
    assert table.macro_precision == pytest.approx((1 / 3) / 3)
    with pytest.raises(InputError):
        per_class_metrics(confusion([], [], 3))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_auc_matches_pair_counting(rng):
    n = 200
    y = rng.integers(0, 2, n).astype(bool)
    y[:2] = [True, False]
    scores = rng.integers(0, 20, n) / 20.0 if rng.uniform() < 0.5 else rng.uniform(size=n)
    fpr, tpr, _ = roc_curve_binary(y, scores)
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert abs(area - pair_count_auc(y.tolist(), scores.tolist())) < 1e-9
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_roc_special_cases():
    y = np.array([0, 0, 1, 1])
    perfect = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    roc = roc_auc(y, perfect)
    assert roc.auc[0] == 1.0 and roc.auc[1] == 1.0
    assert any(f == 0 and t == 1 for f, t in zip(roc.fpr[1], roc.tpr[1]))
    flat = roc_auc(y, np.full((4, 2), 0.5))
    assert flat.auc[0] == 0.5 and flat.auc_rank[0] == 0.5
    partial = roc_auc([0, 0, 1], np.full((3, 3), 1 / 3))
    assert partial.absent == (2,)
    assert partial.macro_auc == 0.5


def rec(sid, sub):
    return SampleRecord(sid, "p", sub, 40, "pt")


def test_audit_examples():
    records = [rec("a", "DC"), rec("b", "A")]
    assert malignancy_audit(records, ["DC", "A"]).count == 0
    audit = malignancy_audit(records, ["LC", "A"])
    assert audit.errors == [("a", "DC", "LC")] and audit.malignant_as_benign == 0
    audit = malignancy_audit(records, ["F", "MC"])
    assert audit.malignant_as_benign == 1 and audit.benign_as_malignant == 1
    assert malignancy_audit(records, [4, 0]).count == 0
    with pytest.raises(InputError):
        malignancy_audit(records, ["DC"])


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_audit_agrees_with_off_block_sums(rng):
    n = 60
    y, p = rng.integers(0, 8, n), rng.integers(0, 8, n)
    records = [rec(str(i), SUBCLASSES[k]) for i, k in enumerate(y)]
    audit = malignancy_audit(records, p)
    cm = confusion(y, p, 8)
    assert (audit.malignant_as_benign, audit.benign_as_malignant) == cross_category_counts(cm)
    assert all(t != q for _, t, q in audit.errors)


def test_report_serialisation(tmp_path):
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(8), 5)
    probs = rng.dirichlet(np.ones(8), size=40)
    probs[np.arange(40), y] += 1
    probs /= probs.sum(axis=1, keepdims=True)
    records = [rec(f"s{i}", SUBCLASSES[k]) for i, k in enumerate(y)]
    report = evaluate(y, probs, records=records, metadata={"model": "toy"})
    data = json.loads(report.to_json())
    assert data["accuracy"] == 1.0 and data["metadata"]["model"] == "toy"
    assert data["confusion_matrix"]["labels"] == list(SUBCLASSES)
    assert data["audit"]["malignant_as_benign"] == 0
    assert "accuracy 1.0000" in report.to_text()
    a, b = plot_roc(report.roc, tmp_path / "a.png"), plot_roc(report.roc, tmp_path / "b.png")
    assert open(a, "rb").read() == open(b, "rb").read()
