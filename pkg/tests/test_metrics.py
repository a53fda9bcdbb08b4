import numpy as np
import pytest

from kneeaug.metrics import (METRICS_HEADER, ConfusionMatrix, DegenerateClass, EmptyMatrix, LabelOutOfRange,
                             LengthMismatch, confusion, metrics_row, per_class_csv, prf1, roc_curve, roc_one_vs_all)


def test_confusion_examples():
    cm = confusion([0, 0, 1, 2], [0, 1, 1, 0])
    expect = np.zeros((5, 5), int)
    expect[0, 0] = expect[0, 1] = expect[1, 1] = expect[2, 0] = 1
    assert np.array_equal(cm.counts, expect)
    assert np.array_equal(confusion(range(5), range(5)).counts, np.eye(5, dtype=int))
    col = confusion([0, 1, 2, 3, 4, 4], [0] * 6).counts
    assert np.count_nonzero(col[:, 1:]) == 0


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])
    with pytest.raises(LabelOutOfRange):
        confusion([0, 5], [0, 0])
    with pytest.raises(LabelOutOfRange):
        confusion([0, 1], [0, -1])


def test_prf1_examples():
    s = prf1(confusion(range(5), range(5)))
    assert (s.accuracy, s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0, 1.0)
    # class 0: TP=3, FP=1, FN=2
    cm = ConfusionMatrix(np.array([[3, 2], [1, 4]]))
    c0 = prf1(cm).per_class[0]
    assert (c0.tp, c0.fp, c0.fn, c0.tn) == (3, 1, 2, 4)
    assert c0.precision == 0.75 and c0.recall == 0.6 and abs(c0.f1 - 2 / 3) < 1e-12
    assert prf1(ConfusionMatrix(np.array([[50, 10], [5, 35]]))).accuracy == 0.85


def test_macro_skips_absent_classes():
    s = prf1(confusion([0, 0, 1], [0, 1, 1]))
    assert len(s.per_class) == 5
    assert abs(s.recall - (0.5 + 1.0) / 2) < 1e-12
    assert s.averaging == "macro"


def test_zero_denominators_are_zero():
    s = prf1(confusion([0, 0], [1, 1]))
    c0, c1 = s.per_class[:2]
    assert c0.precision == 0 and c1.recall == 0 and c0.f1 == 0


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        prf1(ConfusionMatrix(np.zeros((5, 5), int)))


def test_row_normalized_and_merge():
    cm = confusion([0, 0, 1], [0, 1, 1])
    rn = cm.row_normalized()
    assert rn[0].tolist()[:2] == [0.5, 0.5] and rn[3].sum() == 0
    assert (cm + cm).total == 6
    assert cm.to_csv().splitlines()[0] == "true\\pred,KL0,KL1,KL2,KL3,KL4"


def test_permutation_relabeling(rng):
    y = rng.integers(0, 5, 200)
    p = rng.integers(0, 5, 200)
    perm = rng.permutation(5)
    a, b = prf1(confusion(y, p)), prf1(confusion(perm[y], perm[p]))
    assert a.accuracy == b.accuracy
    for k in range(5):
        assert a.per_class[k].f1 == b.per_class[perm[k]].f1


def test_roc_examples():
    assert roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    tie = roc_curve([0.5] * 6, [1, 0, 1, 0, 0, 1])
    assert tie.points == [(0.0, 0.0), (1.0, 1.0)] and tie.auc == 0.5
    r = roc_curve([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
    assert r.auc == 0.75
    assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert r.to_csv().splitlines()[0] == "threshold,fpr,tpr"


def test_roc_degenerate():
    with pytest.raises(DegenerateClass):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(DegenerateClass):
        roc_one_vs_all(np.full((3, 5), 0.2), [0, 0, 0], 1)


def test_roc_one_vs_all_uses_column():
    scores = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    r = roc_one_vs_all(scores, [0, 1, 0], 1)
    assert r.auc == 1.0


def test_csv_rows():
    s = prf1(confusion([0, 1], [0, 1]))
    assert METRICS_HEADER == "condition,accuracy,precision,recall,f1"
    assert metrics_row("noise05", s) == "noise05,1.000000,1.000000,1.000000,1.000000"
    assert per_class_csv(s).splitlines()[1].startswith("KL0,1,0,0,1,")
