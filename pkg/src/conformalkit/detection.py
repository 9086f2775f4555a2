"""Bounding-box conformal calibration.

Predictions are matched to ground truth greedily by descending IoU; signed
per-side errors of the matched pairs feed four conformal quantiles at
alpha/4 each (a Bonferroni split, so the joint guarantee holds at alpha).
Test-time boxes are expanded by the four quantiles.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from .cp import RiskLevel, ScoreSet, as_risk, conformal_quantile
from .errors import InfiniteThreshold, InvalidTau, InvariantViolation, NoMatches

__all__ = [
    "Box",
    "DetectionList",
    "MatchSet",
    "DetThreshold",
    "DegenerateBoxWarning",
    "iou",
    "match_boxes",
    "box_scores",
    "fit_det",
    "conformalize_box",
    "conformalize_detections",
]


class DegenerateBoxWarning(UserWarning):
    """A shrinking threshold collapsed a box; it was repaired to 1 px."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with x_min < x_max and y_min < y_max, in pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvariantViolation(f"box coordinates must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvariantViolation(f"degenerate box: {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, other: "Box") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def to_json(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}


@dataclass(frozen=True)
class DetectionList:
    """Parallel arrays of boxes with optional class ids and confidences."""

    boxes: tuple
    class_ids: tuple | None = None
    confidences: tuple | None = None

    def __post_init__(self):
        boxes = tuple(self.boxes)
        object.__setattr__(self, "boxes", boxes)
        for name in ("class_ids", "confidences"):
            values = getattr(self, name)
            if values is not None:
                values = tuple(values)
                if len(values) != len(boxes):
                    raise InvariantViolation(f"{name} length {len(values)} != {len(boxes)} boxes")
                object.__setattr__(self, name, values)
        if self.confidences is not None:
            for c in self.confidences:
                if c is not None and not 0.0 <= c <= 1.0:
                    raise InvariantViolation(f"confidence {c} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict:
        out = []
        for i, box in enumerate(self.boxes):
            entry = {"id": i}
            entry["class"] = self.class_ids[i] if self.class_ids is not None else None
            entry["confidence"] = self.confidences[i] if self.confidences is not None else None
            entry.update(box.to_json())
            out.append(entry)
        return {"boxes": out}

    @classmethod
    def from_json(cls, doc: dict) -> "DetectionList":
        try:
            rows = doc["boxes"]
            boxes = tuple(Box(r["x_min"], r["y_min"], r["x_max"], r["y_max"]) for r in rows)
            class_ids = tuple(r.get("class") for r in rows)
            confidences = tuple(r.get("confidence") for r in rows)
        except (KeyError, TypeError) as exc:
            raise InvariantViolation(f"malformed detection list: {exc}") from exc
        if all(c is None for c in class_ids):
            class_ids = None
        if all(c is None for c in confidences):
            confidences = None
        return cls(boxes, class_ids, confidences)


@dataclass(frozen=True)
class MatchSet:
    """One-to-one (prediction, ground truth) pairs with IoU >= tau."""

    pairs: tuple  # of (Box, Box)
    tau: float

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class DetThreshold:
    """Per-side quantiles (x_min, y_min, x_max, y_max order) plus provenance."""

    q: tuple
    alpha: RiskLevel
    counts: tuple
    tau: float = 0.5

    def __post_init__(self):
        if len(self.q) != 4 or len(self.counts) != 4:
            raise InvariantViolation("detection threshold needs 4 quantiles and 4 counts")
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.q)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_boxes(preds: DetectionList, gts: DetectionList, tau: float) -> MatchSet:
    """Greedy one-to-one matching by descending IoU.

    Candidate pairs with IoU >= tau are visited from highest IoU down (ties
    broken by prediction index, then ground-truth index); each prediction
    and each ground truth is used at most once, so the result is invariant
    to input ordering up to that stated tie-break.
    """
    if not (isinstance(tau, (int, float)) and 0.0 < tau < 1.0):
        raise InvalidTau(f"tau must lie strictly inside (0, 1), got {tau}")
    candidates = []
    for i, p in enumerate(preds.boxes):
        for j, g in enumerate(gts.boxes):
            overlap = iou(p, g)
            if overlap >= tau:
                candidates.append((-overlap, i, j))
    candidates.sort()
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        pairs.append((preds.boxes[i], gts.boxes[j]))
    return MatchSet(tuple(pairs), float(tau))


def box_scores(pair: tuple) -> tuple:
    """Signed per-side errors of a matched (prediction, ground truth) pair.

    Order (x_min, y_min, x_max, y_max); a positive component means the
    prediction under-covers the truth on that side.
    """
    pred, gt = pair
    return (
        pred.x_min - gt.x_min,
        pred.y_min - gt.y_min,
        gt.x_max - pred.x_max,
        gt.y_max - pred.y_max,
    )


def fit_det(
    calib: list[tuple],
    alpha: float | RiskLevel,
    tau: float = 0.5,
) -> DetThreshold:
    """Fit per-side quantiles over matched pairs pooled across images.

    Parameters
    ----------
    calib : list of (DetectionList, DetectionList)
        Per-image (predictions, ground truths).
    alpha : float or RiskLevel
        Overall miscoverage; each side is fitted at alpha / 4.
    tau : float
        IoU threshold used for matching.

    Raises
    ------
    NoMatches
        If no pair clears tau on any image.
    """
    risk = as_risk(alpha)
    per_side = [[], [], [], []]
    for preds, gts in calib:
        for pair in match_boxes(preds, gts, tau).pairs:
            s = box_scores(pair)
            for m in range(4):
                per_side[m].append(s[m])
    if not per_side[0]:
        raise NoMatches(f"no prediction/ground-truth pair reached IoU {tau}")
    q = []
    counts = []
    for side in per_side:
        t = conformal_quantile(ScoreSet.from_iterable(side), risk.alpha / 4.0)
        q.append(t.value)
        counts.append(t.n)
    return DetThreshold(tuple(q), risk, tuple(counts), float(tau))


def _repair_axis(lo: float, hi: float, bounds_lo: float | None, bounds_hi: float | None):
    """Collapse a crossed axis extent to a 1-px span at its midpoint."""
    mid = 0.5 * (lo + hi)
    lo, hi = mid - 0.5, mid + 0.5
    if bounds_lo is not None and lo < bounds_lo:
        lo, hi = bounds_lo, bounds_lo + 1.0
    if bounds_hi is not None and hi > bounds_hi:
        lo, hi = bounds_hi - 1.0, bounds_hi
    return lo, hi


def conformalize_box(box: Box, t: DetThreshold, bounds: Box | None = None) -> Box:
    """Expand a predicted box by the fitted per-side quantiles.

    The expansion is (x_min - q1, y_min - q2, x_max + q3, y_max + q4),
    intersected with image bounds when given. Negative quantiles shrink; a
    shrink that crosses an axis is repaired to a 1-px span at the midpoint
    of the crossed extent (a DegenerateBoxWarning is emitted).

    Raises
    ------
    InfiniteThreshold
        If any quantile component is +inf (calibration set too small).
    """
    if not t.is_finite:
        raise InfiniteThreshold(
            "threshold has +inf components; refit with a larger calibration set"
        )
    q1, q2, q3, q4 = t.q
    x_min, y_min = box.x_min - q1, box.y_min - q2
    x_max, y_max = box.x_max + q3, box.y_max + q4
    if bounds is not None:
        x_min, y_min = max(x_min, bounds.x_min), max(y_min, bounds.y_min)
        x_max, y_max = min(x_max, bounds.x_max), min(y_max, bounds.y_max)
    bx = (bounds.x_min, bounds.x_max) if bounds is not None else (None, None)
    by = (bounds.y_min, bounds.y_max) if bounds is not None else (None, None)
    if x_min >= x_max:
        x_min, x_max = _repair_axis(x_min, x_max, *bx)
        warnings.warn("shrunk box collapsed on x; repaired to 1 px", DegenerateBoxWarning, stacklevel=2)
    if y_min >= y_max:
        y_min, y_max = _repair_axis(y_min, y_max, *by)
        warnings.warn("shrunk box collapsed on y; repaired to 1 px", DegenerateBoxWarning, stacklevel=2)
    return Box(x_min, y_min, x_max, y_max)


def conformalize_detections(
    detections: DetectionList, t: DetThreshold, bounds: Box | None = None
) -> DetectionList:
    """Apply conformalize_box to every predicted box, keeping metadata."""
    boxes = tuple(conformalize_box(b, t, bounds) for b in detections.boxes)
    return DetectionList(boxes, detections.class_ids, detections.confidences)
