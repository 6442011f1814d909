"""Confusion-matrix accounting and the per-class / overall accuracy measures."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    def __init__(self, class_count: int, counts: Optional[np.ndarray] = None):
        if class_count < 1:
            raise ContractError("class_count must be positive")
        self.class_count = class_count
        if counts is None:
            counts = np.zeros((class_count, class_count), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (class_count, class_count):
            raise DimensionError(f"counts must be {class_count}x{class_count}, got {counts.shape}")
        if np.any(counts < 0):
            raise ContractError("confusion counts must be non-negative")
        self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth, predicted) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=np.int64).ravel()
        p = np.asarray(predicted, dtype=np.int64).ravel()
        if t.shape != p.shape:
            raise DimensionError(f"truth has {t.size} entries, predictions {p.size}")
        for name, v in (("truth", t), ("prediction", p)):
            if v.size and (v.min() < 0 or v.max() >= self.class_count):
                raise ContractError(f"{name} label out of range [0, {self.class_count})")
        np.add.at(self.counts, (t, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise DimensionError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.class_count, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, truth, predicted) -> ConfusionMatrix:
    return cm.accumulate(truth, predicted)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    oa: float
    avg_f1: float
    present: np.ndarray  # classes with at least one true or predicted instance
    class_names: Optional[Sequence[str]] = None

    def names(self) -> list:
        if self.class_names is not None:
            return list(self.class_names)
        return [str(i) for i in range(len(self.f1))]

    def to_csv(self) -> str:
        lines = ["class,precision,recall,f1"]
        for name, pr, re, f in zip(self.names(), self.precision, self.recall, self.f1):
            lines.append(f"{name},{pr:.4f},{re:.4f},{f:.4f}")
        lines.append(f"OA,{self.oa:.4f},,")
        lines.append(f"AvgF1,{self.avg_f1:.4f},,")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def to_table(self) -> str:
        names = self.names()
        w = max(8, *(len(n) for n in names))
        rows = [f"{'class':<{w}}  precision  recall  f1"]
        for name, pr, re, f in zip(names, self.precision, self.recall, self.f1):
            rows.append(f"{name:<{w}}  {pr:9.4f}  {re:6.4f}  {f:.4f}")
        rows.append(f"{'OA':<{w}}  {self.oa:.4f}")
        rows.append(f"{'AvgF1':<{w}}  {self.avg_f1:.4f}")
        return "\n".join(rows)


def report(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None, drop_absent: bool = True) -> MetricsReport:
    """Per-class precision/recall/F1, overall accuracy and mean F1.

    Zero denominators give 0. With ``drop_absent`` the mean F1 skips
    classes that never occur in truth or prediction.
    """
    if cm.total == 0:
        raise ContractError("cannot report on an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    precision = _ratio(tp, pred)
    recall = _ratio(tp, true)
    f1 = _ratio(2 * precision * recall, precision + recall)
    present = (pred + true) > 0
    used = f1[present] if drop_absent else f1
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        oa=float(tp.sum() / c.sum()),
        avg_f1=float(used.mean()),
        present=present,
        class_names=class_names,
    )
