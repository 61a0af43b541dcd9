"""Binary classification metrics with machine (label 1) as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    macro_f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(predictions, labels) -> Metrics:
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"predictions ({pred.shape}) and labels ({gold.shape}) differ in length")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    tp = int(np.sum((pred == 1) & (gold == 1)))
    fp = int(np.sum((pred == 1) & (gold == 0)))
    fn = int(np.sum((pred == 0) & (gold == 1)))
    tn = int(np.sum((pred == 0) & (gold == 0)))
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    f1 = _f1(precision, recall)
    f1_human = _f1(_ratio(tn, tn + fn), _ratio(tn, tn + fp))
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=(f1 + f1_human) / 2,
        accuracy=(tp + tn) / pred.size,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )
