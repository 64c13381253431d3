"""Segmentation metrics: IoU, mean IoU, precision at IoU thresholds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)

# Both masks empty counts as perfect agreement (there is no region and the
# prediction says so); empty-vs-nonempty scores 0.
EMPTY_CONVENTION = "both-empty IoU = 1; empty vs nonempty = 0"


def binarize(logits) -> np.ndarray:
    """Pixel is foreground iff its logit is strictly positive."""
    from .autodiff import Tensor

    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (data > 0).astype(np.uint8)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def miou(pairs) -> float:
    """Arithmetic mean of per-pair IoU (exactly rounded sum)."""
    ious = [iou(p, g) for p, g in pairs]
    if not ious:
        raise ContractError("miou needs at least one mask pair")
    return math.fsum(ious) / len(ious)


def pr_at_x(pairs, thresholds=THRESHOLDS) -> dict[float, float]:
    """Fraction of pairs whose IoU strictly surpasses each threshold."""
    ious = [iou(p, g) for p, g in pairs]
    if not ious:
        raise ContractError("pr_at_x needs at least one mask pair")
    return {float(t): float(np.mean([v > t for v in ious])) for t in thresholds}


@dataclass
class MetricReport:
    miou: float
    pr: dict[float, float]
    per_sample: list[float] = field(default_factory=list)
    conventions: str = EMPTY_CONVENTION

    @classmethod
    def from_pairs(cls, pairs) -> "MetricReport":
        pairs = list(pairs)
        ious = [iou(p, g) for p, g in pairs]
        if not ious:
            raise ContractError("metric report needs at least one mask pair")
        pr = {float(t): float(np.mean([v > t for v in ious])) for t in THRESHOLDS}
        return cls(miou=math.fsum(ious) / len(ious), pr=pr, per_sample=ious)

    def to_dict(self) -> dict:
        return {
            "conventions": self.conventions,
            "miou": self.miou,
            "pr": {f"{t:.1f}": v for t, v in sorted(self.pr.items())},
            "per_sample_iou": self.per_sample,
        }
