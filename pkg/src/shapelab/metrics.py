"""Task metrics and the relative-regret comparison statistic.

All metrics are pure functions of (prediction, gold); re-evaluating a
stored prediction file reproduces scores bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("exact_match", "count_accuracy", "mIoU", "box_IoU",
                "val_perplexity", "pair_accuracy")


@dataclass(frozen=True)
class MetricResult:
    task: str
    metric: str
    value: float
    seed: int
    n_examples: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("metric value must be finite")


def exact_match(pred, gold):
    """Whitespace-trimmed, case-sensitive string equality."""
    return 1.0 if pred.strip() == gold.strip() else 0.0


def miou(pred_mask, gold_mask):
    """Intersection over union of boolean rasters on the same canvas."""
    pred = np.asarray(pred_mask, dtype=bool)
    gold = np.asarray(gold_mask, dtype=bool)
    if pred.shape != gold.shape:
        raise ValueError("masks must share a canvas")
    union = np.logical_or(pred, gold).sum()
    if union == 0:
        return 1.0    # both empty
    return float(np.logical_and(pred, gold).sum() / union)


def box_iou(pred, gold):
    iy = max(0.0, min(pred.ymax, gold.ymax) - max(pred.ymin, gold.ymin))
    ix = max(0.0, min(pred.xmax, gold.xmax) - max(pred.xmin, gold.xmin))
    inter = iy * ix
    union = ((pred.ymax - pred.ymin) * (pred.xmax - pred.xmin)
             + (gold.ymax - gold.ymin) * (gold.xmax - gold.xmin) - inter)
    if union == 0:
        return 1.0 if inter == 0 else 0.0
    return float(inter / union)


def relative_regret(score, ref_score, higher_is_better=True):
    """(ref - score) / |ref| when higher is better; negated otherwise."""
    if ref_score == 0:
        raise ValueError("relative regret undefined for zero reference")
    r = (ref_score - score) / abs(ref_score)
    return r if higher_is_better else -r
