"""Binary classification metrics (attack = positive class)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numeric import ATTACK


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        return cls(_ratio(tp + tn, tp + fp + tn + fn), precision, recall, f1, tp, fp, tn, fn)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, truth) -> MetricsReport:
    """Confusion counts and the derived rates; 0/0 is reported as 0."""
    pred = np.asarray(predictions).astype(np.int64).ravel()
    true = np.asarray(truth).astype(np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions for {true.size} labels")
    if not (np.isin(pred, (0, 1)).all() and np.isin(true, (0, 1)).all()):
        raise ValueError("labels must be binary")
    pos_p, pos_t = pred == ATTACK, true == ATTACK
    tp = int(np.sum(pos_p & pos_t))
    fp = int(np.sum(pos_p & ~pos_t))
    tn = int(np.sum(~pos_p & ~pos_t))
    fn = int(np.sum(~pos_p & pos_t))
    return MetricsReport.from_counts(tp, fp, tn, fn)


def per_group_metrics(predictions, truth, groups) -> dict[int, MetricsReport]:
    pred, true, grp = map(np.asarray, (predictions, truth, groups))
    return {int(g): compute_metrics(pred[grp == g], true[grp == g]) for g in np.unique(grp)}
