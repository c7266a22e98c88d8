"""Confusion matrices and per-class precision, recall, F1.

Accuracy is trace/total, which reduces to (TP+TN)/(TP+TN+FP+FN) for two
classes. Degenerate ratios (0/0) are reported as 0 and flagged.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import CLASS_NAMES


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; row = true class, column = predicted class

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts).astype(np.int64)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()


def confusion(true_labels, predicted_labels, classes: int) -> ConfusionMatrix:
    y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"label lists differ in length: {y.size} vs {p.size}")
    for name, arr in (("true", y), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise ValueError(f"{name} labels must lie in [0, {classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den) -> tuple[Fraction, bool]:
    return (Fraction(int(num), int(den)), False) if den else (Fraction(0), True)


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_f1: float  # mean F1 over classes that occur as a label or a prediction
    weighted_f1: float
    degenerate: list[int]  # classes where a 0/0 ratio was replaced by 0


def report(m: ConfusionMatrix) -> ClassReport:
    total = m.total
    if total == 0:
        raise ValueError("cannot report on an empty confusion matrix")
    tp, fp, fn = m.tp(), m.fp(), m.fn()
    C = m.classes
    # exact rationals from the counts, rounded to float once at the end
    prec, rec, f1 = [], [], []
    degenerate = []
    for c in range(C):
        p, d1 = _ratio(tp[c], tp[c] + fp[c])
        r, d2 = _ratio(tp[c], tp[c] + fn[c])
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else Fraction(0))
        if d1 or d2:
            degenerate.append(c)
    support = m.counts.sum(axis=1)
    accuracy = Fraction(int(tp.sum()), total)
    weighted = sum(f * int(s) for f, s in zip(f1, support)) / int(support.sum())
    # classes never seen in either labels or predictions stay out of the macro mean
    present = (support + m.counts.sum(axis=0)) > 0
    macro = sum(f for f, keep in zip(f1, present) if keep) / int(present.sum())
    as_array = lambda vals: np.array([float(v) for v in vals])
    return ClassReport(as_array(prec), as_array(rec), as_array(f1), support, float(accuracy), float(macro),
                       float(weighted), degenerate)


def _names(C, class_names):
    if class_names is not None:
        return list(class_names)
    return list(CLASS_NAMES) if C == len(CLASS_NAMES) else [str(c) for c in range(C)]


def report_csv(rep: ClassReport, class_names=None) -> str:
    out = io.StringIO()
    out.write("class,precision,recall,f1,support\n")
    for name, p, r, f, s in zip(_names(len(rep.f1), class_names), rep.precision, rep.recall, rep.f1, rep.support):
        out.write(f"{name},{p:.6f},{r:.6f},{f:.6f},{int(s)}\n")
    return out.getvalue()


def report_table(rep: ClassReport, class_names=None) -> str:
    names = _names(len(rep.f1), class_names)
    width = max(12, max(len(n) for n in names))
    lines = [f"{'class':<{width}}  {'precision':>9}  {'recall':>6}  {'f1-score':>8}  {'support':>7}"]
    for name, p, r, f, s in zip(names, rep.precision, rep.recall, rep.f1, rep.support):
        lines.append(f"{name:<{width}}  {p:>9.2f}  {r:>6.2f}  {f:>8.2f}  {int(s):>7d}")
    lines.append(f"{'Avg. F1':<{width}}  {'':>9}  {'':>6}  {rep.macro_f1:>8.2f}  {int(rep.support.sum()):>7d}")
    lines.append(f"{'weighted F1':<{width}}  {'':>9}  {'':>6}  {rep.weighted_f1:>8.2f}")
    lines.append(f"{'accuracy':<{width}}  {'':>9}  {'':>6}  {rep.accuracy:>8.2f}")
    if rep.degenerate:
        lines.append("warning: 0/0 precision or recall set to 0 for classes "
                     + ", ".join(names[c] for c in rep.degenerate))
    return "\n".join(lines) + "\n"
