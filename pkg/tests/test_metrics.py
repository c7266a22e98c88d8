from fractions import Fraction

import numpy as np
import pytest

from dilres.metrics import confusion, f1_score, report, report_csv, report_table
from oracles import recount


def test_confusion_examples():
    assert np.array_equal(confusion([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3, dtype=int))
    assert not confusion([], [], 4).counts.any()
    m = confusion([0, 0, 1, 2], [0, 1, 1, 1], 3).counts
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [0, 1, 0]]


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion([0, 2], [0, 1], 2)
    with pytest.raises(ValueError):
        confusion([0, 1], [0, -1], 2)


def test_derived_counts():
    m = confusion([0, 0, 1, 2], [0, 1, 1, 1], 3)
    assert m.tp().tolist() == [1, 1, 0]
    assert m.fp().tolist() == [0, 2, 0]
    assert m.fn().tolist() == [1, 0, 1]
    assert m.tn().tolist() == [2, 1, 3]


def test_report_all_correct():
    rep = report(confusion([0, 1, 1, 0], [0, 1, 1, 0], 2))
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0
    assert rep.precision.tolist() == [1, 1] and rep.recall.tolist() == [1, 1]


def test_f1_rounding_example():
    assert round(f1_score(0.75, 0.95), 2) == 0.84
    assert f1_score(0, 0) == 0


def test_report_zero_total():
    with pytest.raises(ValueError):
        report(confusion([], [], 3))


def test_report_matches_recount(rng):
    y = rng.integers(0, 8, 1000)
    p = rng.integers(0, 8, 1000)
    rep = report(confusion(y, p, 8))
    ref = recount(y.tolist(), p.tolist(), 8)
    assert rep.accuracy == float(ref["accuracy"])
    assert rep.support.tolist() == ref["support"]
    for c in range(8):
        assert rep.precision[c] == float(ref["precision"][c])
        assert rep.recall[c] == float(ref["recall"][c])
        assert rep.f1[c] == float(ref["f1"][c])
    assert rep.macro_f1 == float(ref["macro_f1"])
    assert rep.weighted_f1 == float(ref["weighted_f1"])


def test_degenerate_classes_flagged():
    rep = report(confusion([0, 0], [0, 1], 3))
    assert rep.degenerate == [1, 2]
    assert rep.precision[1] == 0 and rep.recall[2] == 0
    # class 2 never appears, so it stays out of the macro mean
    assert rep.macro_f1 == pytest.approx((rep.f1[0] + rep.f1[1]) / 2)


def test_weighted_f1():
    rep = report(confusion([0, 0, 0, 1], [0, 0, 1, 1], 2))
    assert rep.weighted_f1 == pytest.approx((3 * rep.f1[0] + rep.f1[1]) / 4)


def test_accuracy_is_exact_ratio():
    rep = report(confusion([0, 1, 2], [0, 1, 1], 3))
    assert rep.accuracy == float(Fraction(2, 3))


def test_csv_and_table_layout():
    rep = report(confusion([0, 1, 1], [0, 1, 0], 2))
    lines = report_csv(rep, ["a", "b"]).splitlines()
    assert lines[0] == "class,precision,recall,f1,support"
    assert lines[1] == "a,0.500000,1.000000,0.666667,1"
    table = report_table(rep, ["a", "b"])
    assert "precision" in table and "Avg. F1" in table and "accuracy" in table
    eight = report(confusion(list(range(8)), list(range(8)), 8))
    assert "diabetic retinopathy" in report_table(eight)
