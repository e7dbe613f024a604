"""Detection and classification metrics.

The positive class is "adversarial". Rates with a zero denominator evaluate
to 0 and add the metric's name to ``degenerate`` instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UsageError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise UsageError(f"negative confusion count in {self}")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=bool)
        y_pred = np.asarray(y_pred, dtype=bool)
        return cls(int(np.sum(y_true & y_pred)), int(np.sum(~y_true & ~y_pred)),
                   int(np.sum(~y_true & y_pred)), int(np.sum(y_true & ~y_pred)))


@dataclass
class DetectionMetrics:
    accuracy: float
    precision: float
    recall: float
    f1_anom: float
    balanced_accuracy: float
    far: float
    dr: float
    degenerate: list = field(default_factory=list)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> DetectionMetrics:
    flags = []
    accuracy = _ratio(c.tp + c.tn, c.total, "accuracy", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    far = _ratio(c.fp, c.fp + c.tn, "far", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1_anom", flags)
    balanced = 0.5 * (recall + (1.0 - far))
    if c.tp + c.fn == 0 or c.fp + c.tn == 0:
        flags.append("balanced_accuracy")
    return DetectionMetrics(accuracy, precision, recall, f1, balanced, far, recall, flags)


def auroc(benign_scores, adversarial_scores) -> float:
    """Mann-Whitney estimate: P(adv > benign) + 0.5 * P(tie)."""
    b = np.asarray(benign_scores, dtype=np.float64).ravel()
    a = np.asarray(adversarial_scores, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise UsageError("AUROC needs at least one benign and one adversarial score")
    ranks = rankdata(np.concatenate([a, b]))  # average ranks split ties evenly
    u = ranks[:len(a)].sum() - len(a) * (len(a) + 1) / 2.0
    return float(u / (len(a) * len(b)))


def rwcg(confidences, correct) -> tuple[float, bool]:
    """Right-wrong confidence gap: mean confidence when right minus when wrong.

    Returns ``(value, degenerate)``; with no right or no wrong predictions the
    value is 0 and ``degenerate`` is True.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if ok.all() or not ok.any():
        return 0.0, True
    return float(conf[ok].mean() - conf[~ok].mean()), False
