"""Pixel-wise conformal calibration of segmentation probability grids.

Scores one-minus-true-class-probability are pooled over every pixel of every
calibration image; the fitted threshold turns a probability grid into
per-pixel prediction sets and into a single calibrated label map that can
rescue foreground pixels the raw argmax sent to background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cp import ConformalThreshold, RiskLevel, ScoreSet, conformal_quantile
from .errors import DimensionMismatch, InvariantViolation

__all__ = [
    "ProbabilityGrid",
    "LabelGrid",
    "SegCalibrationPair",
    "PixelPredictionSet",
    "collect_pixel_scores",
    "fit_seg",
    "pixel_prediction_set",
    "prediction_set_mask",
    "calibrate_label_grid",
    "label_objects",
    "SegObject",
]

SIMPLEX_TOL = 1e-6
MAX_LABEL = np.iinfo(np.uint16).max


@dataclass(frozen=True)
class ProbabilityGrid:
    """H x W grid of per-pixel probability vectors over K+1 classes.

    Class 0 is background. Held as float64 in memory (the container format
    stores float32 and widens on read); each pixel vector must be a
    probability simplex within 1e-6.
    """

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.probs)
        if arr.ndim != 3:
            raise InvariantViolation(f"probability grid must be H x W x (K+1), got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c < 2:
            raise InvariantViolation(f"need H >= 1, W >= 1 and K >= 1 classes, got shape {arr.shape}")
        arr = arr.astype(np.float64, copy=False)
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0:
            raise InvariantViolation("probabilities must be finite and non-negative")
        sums = arr.sum(axis=2)
        err = np.abs(sums - 1.0).max()
        if err > SIMPLEX_TOL:
            raise InvariantViolation(f"pixel vectors deviate from the simplex by {err:.3g} (> {SIMPLEX_TOL})")
        object.__setattr__(self, "probs", arr)

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        """K+1, background included."""
        return self.probs.shape[2]


@dataclass(frozen=True)
class LabelGrid:
    """H x W integer labels in {0, ..., K}; uint16 storage."""

    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvariantViolation(f"label grid must be H x W, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise InvariantViolation(f"labels must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > MAX_LABEL):
            raise InvariantViolation(f"labels must lie in [0, {MAX_LABEL}]")
        object.__setattr__(self, "labels", arr.astype(np.uint16, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SegCalibrationPair:
    """A probability grid paired with its ground-truth label grid."""

    grid: ProbabilityGrid
    truth: LabelGrid

    def __post_init__(self):
        if (self.grid.height, self.grid.width) != (self.truth.height, self.truth.width):
            raise DimensionMismatch(
                f"grid is {self.grid.height}x{self.grid.width} but truth is "
                f"{self.truth.height}x{self.truth.width}"
            )
        if int(self.truth.labels.max(initial=0)) >= self.grid.num_classes:
            raise InvariantViolation("truth contains a label outside the grid's class range")


@dataclass(frozen=True)
class PixelPredictionSet:
    """Set of class ids whose nonconformity clears the fitted threshold."""

    members: frozenset

    def __contains__(self, k: int) -> bool:
        return k in self.members

    def __len__(self) -> int:
        return len(self.members)


def collect_pixel_scores(pairs: list[SegCalibrationPair]) -> ScoreSet:
    """Pool one-minus-true-class-probability over every pixel of every pair.

    Pairs may differ in height and width from each other; the result is a
    single multiset of size sum(H_i * W_i), independent of iteration order.
    """
    chunks = []
    for pair in pairs:
        probs = pair.grid.probs
        truth = pair.truth.labels.astype(np.intp, copy=False)
        p_true = np.take_along_axis(probs, truth[:, :, None], axis=2)[:, :, 0]
        chunks.append((1.0 - p_true).ravel())
    if not chunks:
        return ScoreSet(np.empty(0))
    return ScoreSet(np.concatenate(chunks))


def fit_seg(pairs: list[SegCalibrationPair], alpha: float | RiskLevel) -> ConformalThreshold:
    """Fit the pooled pixel-wise threshold at miscoverage alpha.

    The rank formula uses the total pixel count N = sum(H_i * W_i), so the
    finite-sample correction reflects the pooled multiset.
    """
    return conformal_quantile(collect_pixel_scores(pairs), alpha)


def pixel_prediction_set(probs, threshold: ConformalThreshold) -> PixelPredictionSet:
    """Prediction set for one pixel: {k : 1 - p_k <= threshold}.

    An infinite threshold yields the full class set.
    """
    vec = np.asarray(probs, dtype=np.float64).ravel()
    if vec.size < 2 or vec.min() < 0 or abs(vec.sum() - 1.0) > SIMPLEX_TOL:
        raise InvariantViolation("pixel vector is not a probability simplex")
    members = np.nonzero((1.0 - vec) <= threshold.value)[0]
    return PixelPredictionSet(frozenset(int(k) for k in members))


def prediction_set_mask(grid: ProbabilityGrid, threshold: ConformalThreshold) -> np.ndarray:
    """Boolean H x W x (K+1) membership mask of every pixel's prediction set."""
    return (1.0 - grid.probs) <= threshold.value


def calibrate_label_grid(grid: ProbabilityGrid, threshold: ConformalThreshold) -> LabelGrid:
    """Collapse per-pixel prediction sets to a single calibrated label map.

    Per pixel: the most probable non-background member of the set wins; a
    set that is empty or contains only background yields label 0. Probability
    ties break toward the smallest class id.
    """
    member = prediction_set_mask(grid, threshold)
    probs = grid.probs
    fg_member = member[:, :, 1:]
    # Fill non-members with -1 so argmax never picks them (probs are >= 0).
    fg_probs = np.where(fg_member, probs[:, :, 1:], -1.0)
    best_fg = np.argmax(fg_probs, axis=2).astype(np.int64) + 1
    labels = np.where(fg_member.any(axis=2), best_fg, 0)
    return LabelGrid(labels.astype(np.uint16))


@dataclass(frozen=True)
class SegObject:
    """One connected component of a calibrated label map."""

    object_id: int
    class_id: int
    class_name: str
    boundary: list  # list of [x, y] pixel coordinates on the component rim
    pixel_count: int

    def to_json(self) -> dict:
        return {
            "id": self.object_id,
            "class": self.class_id,
            "class_name": self.class_name,
            "boundary": self.boundary,
            "pixel_count": self.pixel_count,
        }


def _boundary_points(mask: np.ndarray) -> list:
    """Rim pixels of a component: members with a 4-neighbour outside it.

    Returned as [x, y] pairs in row-major order (deterministic).
    """
    padded = np.pad(mask, 1, mode="constant")
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    rim = mask & ~interior
    ys, xs = np.nonzero(rim)
    return [[int(x), int(y)] for y, x in zip(ys, xs)]


def label_objects(
    labels: LabelGrid, class_names: list[str] | None = None
) -> tuple[list[SegObject], np.ndarray]:
    """Split a label map into connected components of same-class pixels.

    4-connectivity; object ids are assigned 1, 2, ... by ascending class id
    and component discovery order, so the result is deterministic. Returns
    the objects plus an H x W object-id grid (0 where background).
    """
    arr = labels.labels
    object_grid = np.zeros(arr.shape, dtype=np.uint16)
    objects: list[SegObject] = []
    next_id = 1
    for class_id in np.unique(arr):
        class_id = int(class_id)
        if class_id == 0:
            continue
        class_mask = arr == class_id
        components, count = ndimage.label(class_mask)
        for comp in range(1, count + 1):
            mask = components == comp
            if next_id > MAX_LABEL:
                raise InvariantViolation("more than 65535 objects in one label map")
            name = (
                class_names[class_id]
                if class_names is not None and class_id < len(class_names)
                else f"class_{class_id}"
            )
            objects.append(
                SegObject(
                    object_id=next_id,
                    class_id=class_id,
                    class_name=name,
                    boundary=_boundary_points(mask),
                    pixel_count=int(mask.sum()),
                )
            )
            object_grid[mask] = next_id
            next_id += 1
    return objects, object_grid
