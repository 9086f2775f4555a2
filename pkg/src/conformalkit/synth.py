"""Seeded synthetic scenarios for coverage experiments and sweeps.

Segmentation truth is sampled from each grid's own probability vectors, so
calibration and test scores are exchangeable by construction and the
conformal guarantee must hold empirically. Detection predictions are ground
truth plus per-side uniform noise whose amplitude varies per box; the shared
amplitude correlates the four side errors, which is the regime where the
Bonferroni split visibly over-covers.
"""

from __future__ import annotations

import numpy as np

from .detection import Box, DetectionList
from .segmentation import LabelGrid, ProbabilityGrid, SegCalibrationPair
from .sequence import TokenDistribution, TokenDistributionSequence

__all__ = [
    "make_seg_pairs",
    "make_det_scenario",
    "make_trace_corpus",
]


def _sample_labels(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    h, w, c = probs.shape
    flat = probs.reshape(-1, c)
    cum = np.cumsum(flat, axis=1)
    cum /= cum[:, -1:]
    u = rng.uniform(size=(flat.shape[0], 1))
    labels = (u > cum[:, :-1]).sum(axis=1)
    return labels.reshape(h, w)


def make_seg_pairs(
    rng: np.random.Generator,
    count: int,
    height: int = 32,
    width: int = 32,
    classes: int = 4,
    concentration: float = 0.8,
) -> list[SegCalibrationPair]:
    """Probability grids with truth drawn from the grids themselves.

    ``classes`` is K (foreground classes); grids carry K+1 channels. A lower
    Dirichlet concentration gives spikier, more confident pixels.
    """
    pairs = []
    for _ in range(count):
        probs = rng.dirichlet(np.full(classes + 1, concentration), size=(height, width))
        grid = ProbabilityGrid(probs)
        truth = LabelGrid(_sample_labels(rng, grid.probs).astype(np.int64))
        pairs.append(SegCalibrationPair(grid, truth))
    return pairs


def make_det_scenario(
    rng: np.random.Generator,
    images: int,
    boxes_per_image: int = 10,
    noise: float = 2.0,
    tight: tuple = (0.02, 0.2),
    sloppy: tuple = (0.8, 1.0),
    sloppy_frac: float = 0.03,
) -> list[tuple]:
    """Per-image (predictions, ground truths) from an under-covering detector.

    Ground-truth boxes sit on a coarse layout grid so greedy IoU matching is
    unambiguous. Each prediction shrinks inward on every side by
    a * noise * U(0, 1) with a per-box precision amplitude: usually tight
    (a ~ U(tight)), occasionally sloppy (a ~ U(sloppy)). The shared amplitude
    correlates the four side errors, so coverage failures cluster on the
    sloppy boxes and the Bonferroni-corrected joint guarantee over-covers.
    The worst shrink (noise per side, on 30+ px boxes) keeps IoU above 0.7,
    so matching at tau = 0.5 always succeeds.
    """
    scenario = []
    for _ in range(images):
        gts = []
        preds = []
        for slot in range(boxes_per_image):
            gx = 100.0 * (slot % 5) + rng.uniform(0, 20)
            gy = 100.0 * (slot // 5) + rng.uniform(0, 20)
            gw = rng.uniform(30, 60)
            gh = rng.uniform(30, 60)
            gts.append(Box(gx, gy, gx + gw, gy + gh))
            regime = sloppy if rng.uniform() < sloppy_frac else tight
            a = rng.uniform(*regime)
            e = a * noise * rng.uniform(0.0, 1.0, size=4)
            preds.append(Box(gx + e[0], gy + e[1], gx + gw - e[2], gy + gh - e[3]))
        scenario.append((DetectionList(tuple(preds)), DetectionList(tuple(gts))))
    return scenario


def make_trace_corpus(
    rng: np.random.Generator,
    answers: int = 20,
    steps: tuple = (4, 12),
    vocab: tuple = (8, 64),
) -> list[TokenDistributionSequence]:
    """Random token-probability traces standing in for generated answers."""
    corpus = []
    for _ in range(answers):
        t = int(rng.integers(steps[0], steps[1] + 1))
        seq = []
        for _ in range(t):
            v = int(rng.integers(vocab[0], vocab[1] + 1))
            probs = np.sort(rng.dirichlet(np.full(v, rng.uniform(0.1, 1.5))))[::-1]
            seq.append(TokenDistribution(probs, v))
        corpus.append(TokenDistributionSequence(tuple(seq)))
    return corpus
