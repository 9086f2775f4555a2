"""Empirical verification layer: coverage, ECE, confidence normalization,
and the alpha/p sweep harness.

Coverage estimators measure the fitted machinery end to end on held-out
pairs; the ECE report carries its binning convention in-band because the
10-bin right-closed layout is a convention, not a derived quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cp import ConformalThreshold
from .detection import DetThreshold, conformalize_box
from .errors import (
    DimensionMismatch,
    InfiniteThreshold,
    InvalidBins,
    InvariantViolation,
)
from .segmentation import SegCalibrationPair, prediction_set_mask
from .sequence import uncertainty_top_p
from . import synth

__all__ = [
    "CoverageReport",
    "ECEBin",
    "ECEReport",
    "SweepTable",
    "coverage_seg",
    "coverage_det",
    "mean_set_size",
    "normalize_confidence",
    "ece",
    "sweep",
    "format_table",
]


@dataclass(frozen=True)
class CoverageReport:
    """Observed coverage against its nominal target."""

    trials: int
    covered: int
    target: float

    @property
    def rate(self) -> float:
        return self.covered / self.trials

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "covered": self.covered,
            "rate": self.rate,
            "target": self.target,
        }


@dataclass(frozen=True)
class ECEBin:
    lo: float
    hi: float
    mean_confidence: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class ECEReport:
    bins: tuple
    ece: float

    def to_json(self) -> dict:
        return {
            "ece": self.ece,
            "binning": "equal-width, right-closed, confidence 0 in first bin",
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "mean_confidence": b.mean_confidence,
                    "accuracy": b.accuracy,
                    "count": b.count,
                }
                for b in self.bins
            ],
        }

    def reliability_rows(self) -> list[tuple]:
        """(confidence_mid, accuracy, count) rows for external plotting."""
        return [((b.lo + b.hi) / 2.0, b.accuracy, b.count) for b in self.bins]


def coverage_seg(threshold: ConformalThreshold, pairs: list[SegCalibrationPair]) -> CoverageReport:
    """Fraction of test pixels whose true label conforms at the threshold."""
    trials = 0
    covered = 0
    for pair in pairs:
        probs = pair.grid.probs
        truth = pair.truth.labels.astype(np.intp, copy=False)
        p_true = np.take_along_axis(probs, truth[:, :, None], axis=2)[:, :, 0]
        covered += int(((1.0 - p_true) <= threshold.value).sum())
        trials += p_true.size
    if trials == 0:
        raise DimensionMismatch("no test pixels supplied")
    return CoverageReport(trials, covered, 1.0 - threshold.alpha.alpha)


def coverage_det(threshold: DetThreshold, pairs) -> CoverageReport:
    """Fraction of matched pairs whose truth fits inside the expanded box.

    ``pairs`` is an iterable of (predicted Box, ground-truth Box); a MatchSet
    works directly via its ``pairs`` attribute.
    """
    if not threshold.is_finite:
        raise InfiniteThreshold("coverage needs finite quantiles; refit with more data")
    pair_list = getattr(pairs, "pairs", pairs)
    trials = 0
    covered = 0
    for pred, gt in pair_list:
        expanded = conformalize_box(pred, threshold)
        covered += int(expanded.contains(gt))
        trials += 1
    if trials == 0:
        raise DimensionMismatch("no matched test pairs supplied")
    return CoverageReport(trials, covered, 1.0 - threshold.alpha.alpha)


def mean_set_size(grids, threshold: ConformalThreshold) -> float:
    """Mean per-pixel prediction-set cardinality across grids."""
    total = 0
    pixels = 0
    for grid in grids:
        member = prediction_set_mask(grid, threshold)
        total += int(member.sum())
        pixels += member.shape[0] * member.shape[1]
    return total / pixels


def normalize_confidence(us_values) -> list[float]:
    """Min-max normalize uncertainty scores and flip them into confidences.

    Higher uncertainty maps to lower confidence; with fewer than two
    distinct values everything maps to 1.0 by convention.
    """
    values = np.asarray(list(us_values), dtype=np.float64)
    if values.size == 0:
        return []
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return [1.0] * values.size
    return (1.0 - (values - lo) / (hi - lo)).tolist()


def ece(records, nbins: int = 10) -> ECEReport:
    """Expected calibration error over (confidence, correct) records.

    Equal-width right-closed bins on [0, 1]; a confidence of exactly 0 lands
    in the first bin. The weighted absolute confidence/accuracy gap sums to
    the scalar ECE.
    """
    if not isinstance(nbins, int) or nbins < 1:
        raise InvalidBins(f"need a positive integer bin count, got {nbins!r}")
    records = list(records)
    conf = np.asarray([r[0] for r in records], dtype=np.float64)
    correct = np.asarray([bool(r[1]) for r in records], dtype=np.float64)
    if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
        raise InvariantViolation("confidences must lie in [0, 1]")
    idx = np.ceil(conf * nbins).astype(np.int64)
    idx = np.clip(idx, 1, nbins)
    bins = []
    total = conf.size
    value = 0.0
    for b in range(1, nbins + 1):
        mask = idx == b
        count = int(mask.sum())
        if count:
            mean_conf = float(conf[mask].mean())
            acc = float(correct[mask].mean())
            value += (count / total) * abs(acc - mean_conf)
        else:
            mean_conf = 0.0
            acc = 0.0
        bins.append(ECEBin((b - 1) / nbins, b / nbins, mean_conf, acc, count))
    return ECEReport(tuple(bins), value)


@dataclass(frozen=True)
class SweepTable:
    """One row per swept parameter value; failed cells carry their error."""

    axis: str
    task: str
    rows: tuple

    def to_json(self) -> dict:
        return {"axis": self.axis, "task": self.task, "rows": list(self.rows)}

    def headers(self) -> list[str]:
        keys: list[str] = [self.axis]
        for row in self.rows:
            for key in row:
                if key not in keys and key != self.axis and not key.startswith("_"):
                    keys.append(key)
        return keys

    def text_table(self) -> str:
        headers = self.headers()
        cells = [[_fmt_cell(row.get(h)) for h in headers] for row in self.rows]
        return format_table(headers, cells)


def _fmt_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_cell(x) for x in v) + "]"
    return str(v)


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(row) for row in rows)
    return "\n".join(out) + "\n"


def _seg_cell(alpha: float, seed: int, options: dict) -> dict:
    from .segmentation import fit_seg

    rng = np.random.default_rng(seed)
    cal = synth.make_seg_pairs(
        rng,
        options.get("cal", 50),
        options.get("height", 24),
        options.get("width", 24),
        options.get("classes", 4),
    )
    test = synth.make_seg_pairs(
        rng,
        options.get("test", 50),
        options.get("height", 24),
        options.get("width", 24),
        options.get("classes", 4),
    )
    t = fit_seg(cal, alpha)
    report = coverage_seg(t, test)
    return {
        "alpha": alpha,
        "threshold": t.value,
        "coverage": report.rate,
        "target": report.target,
        "mean_set_size": mean_set_size((p.grid for p in test), t),
    }


def _det_cell(alpha: float, seed: int, options: dict) -> dict:
    from .detection import fit_det, match_boxes

    rng = np.random.default_rng(seed)
    tau = options.get("tau", 0.5)
    per_image = options.get("boxes_per_image", 10)
    cal = synth.make_det_scenario(rng, options.get("cal", 100), per_image)
    test = synth.make_det_scenario(rng, options.get("test", 100), per_image)
    t = fit_det(cal, alpha, tau)
    pairs = []
    for preds, gts in test:
        pairs.extend(match_boxes(preds, gts, tau).pairs)
    report = coverage_det(t, pairs)
    return {
        "alpha": alpha,
        "q": list(t.q),
        "coverage": report.rate,
        "target": report.target,
    }


def _uq_cell(p: float, seed: int, options: dict) -> dict:
    rng = np.random.default_rng(seed)
    corpus = synth.make_trace_corpus(rng, options.get("answers", 20))
    scores = [uncertainty_top_p(seq, p).value for seq in corpus]
    return {
        "p": p,
        "mean_us": float(np.mean(scores)),
        "us": scores,
    }


_TASKS = {
    ("alpha", "seg-coverage"): _seg_cell,
    ("alpha", "det-coverage"): _det_cell,
    ("p", "top-p"): _uq_cell,
}


def sweep(axis: str, values, task: str, seed: int = 0, options: dict | None = None) -> SweepTable:
    """Refit and rescore a synthetic scenario once per parameter value.

    The same seed is used for every cell, so rows differ only in the swept
    parameter. A failing cell becomes a row annotated with the error code
    instead of aborting the sweep.
    """
    key = (axis, task)
    if key not in _TASKS:
        known = ", ".join(f"{a}/{t}" for a, t in _TASKS)
        raise InvariantViolation(f"no task {task!r} on axis {axis!r} (known: {known})")
    options = options or {}
    cell = _TASKS[key]
    rows = []
    for value in values:
        try:
            rows.append(cell(float(value), seed, options))
        except Exception as exc:  # annotated, not fatal
            rows.append({axis: float(value), "error": type(exc).__name__, "message": str(exc)})
    return SweepTable(axis, task, tuple(rows))
