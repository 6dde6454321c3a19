"""Association-level confusion metrics against a ground truth.

Counts are in units of associations: a true positive is a correctly
predicted association, a false positive an incorrect one, and a false
negative a true association that was missed. True negatives are counted per
landmark, one for each landmark that is unpaired in the truth and was left
unmatched by the prediction (on either slide).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .model import GroundTruthMatches, MatchSet

__all__ = ["ConfusionCounts", "MatchMetrics", "evaluate"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")


@dataclass(frozen=True)
class MatchMetrics:
    """Sensitivity, precision, specificity and NPV.

    Ratios with an empty denominator are ``None`` (reported as "undefined"
    in serialized output), never silently coerced to 0 or 1.
    """

    counts: ConfusionCounts
    sensitivity: Optional[float]
    precision: Optional[float]
    specificity: Optional[float]
    npv: Optional[float]


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def evaluate(predicted: MatchSet, truth: GroundTruthMatches) -> MatchMetrics:
    """Score a predicted match set against the ground truth.

    The prediction's source and target slides must both be covered by the
    truth, and every predicted landmark id must exist in the truth's id
    universe for its slide.
    """
    src, tgt = predicted.source_slide, predicted.target_slide
    true_pairs = truth.pairs(src, tgt)
    pred_pairs = predicted.pair_ids()

    universe_src = truth.universe(src)
    universe_tgt = truth.universe(tgt)
    for g_id, h_id in sorted(pred_pairs):
        if g_id not in universe_src:
            raise ValueError(f"predicted landmark {g_id!r} unknown in slide {src!r}")
        if h_id not in universe_tgt:
            raise ValueError(f"predicted landmark {h_id!r} unknown in slide {tgt!r}")

    tp = len(pred_pairs & true_pairs)
    fp = len(pred_pairs - true_pairs)
    fn = len(true_pairs - pred_pairs)

    matched_src = {g for g, _ in pred_pairs}
    matched_tgt = {h for _, h in pred_pairs}
    unpaired_src, unpaired_tgt = truth.unpaired_ids(src, tgt)
    tn = sum(1 for g in unpaired_src if g not in matched_src)
    tn += sum(1 for h in unpaired_tgt if h not in matched_tgt)

    counts = ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)
    return MatchMetrics(
        counts=counts,
        sensitivity=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
        specificity=_ratio(tn, tn + fp),
        npv=_ratio(tn, tn + fn),
    )
