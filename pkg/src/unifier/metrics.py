"""VQA sub-scores, IoU box matching and F1 for scenario evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int | None = None
    confidence: float | None = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ContractError(f"box coordinates must be finite: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ContractError(f"box corners out of order: {coords}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_list(cls, values):
        """``[x1, y1, x2, y2]`` optionally followed by class and confidence."""
        values = list(values)
        if len(values) < 4:
            raise ContractError(f"box needs at least 4 numbers, got {values}")
        cid = None if len(values) < 5 or values[4] is None else int(values[4])
        conf = None if len(values) < 6 or values[5] is None else float(values[5])
        return cls(*(float(v) for v in values[:4]), class_id=cid, confidence=conf)

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2, self.class_id, self.confidence]


@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: list = field(default_factory=list)

    def __add__(self, other):
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.pairs + other.pairs)


# ---------------------------------------------------------------------------
# VQA sub-scores


def score_counting(pred, gt):
    """1 for an exact count, 0.5 when off by one, else 0."""
    pred, gt = int(pred), int(gt)
    if pred < 0 or gt < 0:
        raise ContractError(f"counts must be nonnegative, got pred={pred}, gt={gt}")
    diff = abs(pred - gt)
    if diff == 0:
        return 1.0
    return 0.5 if diff == 1 else 0.0


def score_classification(pred, gt):
    """``max((n_correct - 0.5 * n_wrong) / n_all, 0)`` over label sets."""
    pred, gt = set(pred), set(gt)
    if not gt:
        raise ContractError("classification ground truth must be nonempty")
    n_correct = len(pred & gt)
    n_wrong = len(pred - gt)
    return max((n_correct - 0.5 * n_wrong) / len(gt), 0.0)


def canonical_token(token):
    return str(token).strip().casefold()


def score_exact(pred, gt):
    return 1.0 if canonical_token(pred) == canonical_token(gt) else 0.0


def vqa_scenario_score(scores):
    """Pool sub-scores (``(kind, score)`` pairs or bare floats) into a percentage."""
    values = [s[1] if isinstance(s, tuple) else s for s in scores]
    if not values:
        raise ContractError("cannot score an empty sample list")
    return 100.0 * math.fsum(values) / len(values)


# ---------------------------------------------------------------------------
# grounding


def iou(a, b):
    if a.area <= 0 or b.area <= 0:
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _compatible(p, g, class_aware):
    return not class_aware or p.class_id == g.class_id


def match_boxes(preds, gts, class_aware=False, threshold=IOU_THRESHOLD):
    """Greedy matching: predictions in descending confidence claim their best free gt.

    Ties in confidence keep input order. A claim needs IoU >= ``threshold``
    (and equal class ids when ``class_aware``).
    """
    order = sorted(
        range(len(preds)),
        key=lambda i: -(preds[i].confidence if preds[i].confidence is not None else 1.0),
    )
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j] or not _compatible(preds[i], g, class_aware):
                continue
            v = iou(preds[i], g)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
            pairs.append((i, best))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=pairs)


def match_boxes_optimal(preds, gts, class_aware=False, threshold=IOU_THRESHOLD):
    """Maximum-cardinality matching over IoU >= threshold edges (Hungarian on 0/1 weights)."""
    from scipy.optimize import linear_sum_assignment

    if not preds or not gts:
        return MatchResult(tp=0, fp=len(preds), fn=len(gts))
    edges = np.array(
        [[1.0 if _compatible(p, g, class_aware) and iou(p, g) >= threshold else 0.0 for g in gts] for p in preds]
    )
    rows, cols = linear_sum_assignment(-edges)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if edges[r, c] > 0]
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=pairs)


def match_boxes_exhaustive(preds, gts, class_aware=False, threshold=IOU_THRESHOLD):
    """Brute-force maximum TP count by enumerating assignments; oracle for tiny instances."""
    ok = [[_compatible(p, g, class_aware) and iou(p, g) >= threshold for g in gts] for p in preds]

    def best_from(i, used):
        if i == len(preds):
            return 0
        best = best_from(i + 1, used)
        for j in range(len(gts)):
            if ok[i][j] and j not in used:
                best = max(best, 1 + best_from(i + 1, used | {j}))
        return best

    return best_from(0, frozenset())


def f1(match):
    """``(precision, recall, F1)``; each is 0 when its denominator is 0."""
    tp, fp, fn = match.tp, match.fp, match.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, score


def f1_scenario(grounding, fine_grained=None):
    """Percentage F1 for a scenario: mean over the grounding kinds it has."""
    if grounding is None:
        raise ContractError("grounding match result is required")
    values = [f1(grounding)[2]]
    if fine_grained is not None:
        values.append(f1(fine_grained)[2])
    return 100.0 * sum(values) / len(values)
