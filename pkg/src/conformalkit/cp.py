"""Split-conformal quantile machinery shared by both calibrators.

The fitted threshold is the ``ceil((n+1)*(1-alpha))``-th smallest calibration
score, with rank overflow mapping to +inf. The rank rule (rather than an
interpolated quantile) keeps thresholds bit-reproducible and equal to an
element of the calibration multiset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCalibrationSet, InvalidRisk, InvariantViolation

__all__ = [
    "ScoreSet",
    "RiskLevel",
    "ConformalThreshold",
    "conformal_quantile",
    "conformal_rank",
]


@dataclass(frozen=True)
class RiskLevel:
    """Miscoverage level alpha, restricted to the open interval (0, 1)."""

    alpha: float

    def __post_init__(self):
        if not (isinstance(self.alpha, (int, float)) and math.isfinite(self.alpha)):
            raise InvalidRisk(f"alpha must be a finite real, got {self.alpha!r}")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidRisk(f"alpha must lie strictly inside (0, 1), got {self.alpha}")


def as_risk(alpha: float | RiskLevel) -> RiskLevel:
    """Coerce a float into a validated RiskLevel (identity on RiskLevel)."""
    if isinstance(alpha, RiskLevel):
        return alpha
    return RiskLevel(float(alpha))


@dataclass(frozen=True)
class ScoreSet:
    """Multiset of finite nonconformity scores.

    Order is irrelevant: every operation on a ScoreSet is a function of the
    multiset only. Stored as a float64 array; duplicates are kept.
    """

    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64).ravel()
        if arr.size and not np.all(np.isfinite(arr)):
            raise InvariantViolation("nonconformity scores must be finite")
        object.__setattr__(self, "scores", arr)

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @classmethod
    def from_iterable(cls, values) -> "ScoreSet":
        return cls(np.asarray(list(values), dtype=np.float64))


@dataclass(frozen=True)
class ConformalThreshold:
    """Fitted quantile state: a calibration score or +inf, plus provenance."""

    value: float
    alpha: RiskLevel
    n: int

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)

    def admits(self, score: float) -> bool:
        """Conformity test: a score conforms when ``score <= value`` (inclusive)."""
        return score <= self.value


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank of the conformal quantile among n sorted scores.

    Returns ``ceil((n+1)*(1-alpha))``; callers treat rank > n as the +inf
    augmentation.
    """
    return math.ceil((n + 1) * (1.0 - alpha))


def conformal_quantile(scores: ScoreSet, alpha: float | RiskLevel) -> ConformalThreshold:
    """Finite-sample-corrected quantile of a calibration score multiset.

    Parameters
    ----------
    scores : ScoreSet
        Calibration nonconformity scores (at least one).
    alpha : float or RiskLevel
        Miscoverage level in (0, 1).

    Returns
    -------
    ConformalThreshold
        The r-th smallest score with ``r = ceil((n+1)*(1-alpha))``, or +inf
        when r exceeds n.

    Raises
    ------
    EmptyCalibrationSet
        If the score multiset is empty.
    InvalidRisk
        If alpha lies outside (0, 1).
    """
    risk = as_risk(alpha)
    n = scores.n
    if n == 0:
        raise EmptyCalibrationSet("cannot take a quantile of zero scores")
    rank = conformal_rank(n, risk.alpha)
    if rank > n:
        return ConformalThreshold(math.inf, risk, n)
    ordered = np.sort(scores.scores)
    return ConformalThreshold(float(ordered[rank - 1]), risk, n)
