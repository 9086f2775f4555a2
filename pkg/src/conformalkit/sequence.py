"""Sequence-level uncertainty scores for generated answers.

Two scorers over per-step token probability distributions: the top-p
prediction-set size (mean count of top-ranked tokens needed to reach
cumulative mass p) and a mean-entropy baseline. Distributions arrive
descending-sorted; a listed prefix plus an explicit tail mass covers
adapters that export only the top of the vocabulary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySequence, InvalidNucleus, InvariantViolation

__all__ = [
    "TokenDistribution",
    "TokenDistributionSequence",
    "NucleusLevel",
    "UncertaintyScore",
    "top_p_set_size",
    "is_truncated_at",
    "uncertainty_top_p",
    "uncertainty_entropy",
    "score_sequence",
    "load_trace_jsonl",
]

MASS_TOL = 1e-6


@dataclass(frozen=True)
class NucleusLevel:
    """Cumulative-mass threshold p in the half-open interval (0, 1]."""

    p: float

    def __post_init__(self):
        if not (isinstance(self.p, (int, float)) and math.isfinite(self.p)):
            raise InvalidNucleus(f"p must be a finite real, got {self.p!r}")
        if not 0.0 < self.p <= 1.0:
            raise InvalidNucleus(f"p must lie in (0, 1], got {self.p}")


def as_nucleus(p: float | NucleusLevel) -> NucleusLevel:
    if isinstance(p, NucleusLevel):
        return p
    return NucleusLevel(float(p))


@dataclass(frozen=True)
class TokenDistribution:
    """Descending-sorted token probabilities for one generation step.

    ``probs`` lists the head of the vocabulary; ``tail_mass`` is the total
    probability of the unlisted tokens. Inputs must arrive pre-sorted; we
    validate rather than re-sort so adapter bugs surface loudly.
    """

    probs: np.ndarray = field(repr=False)
    vocab_size: int
    tail_mass: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64).ravel()
        if arr.size < 1:
            raise InvariantViolation("a step must list at least one token probability")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0:
            raise InvariantViolation("token probabilities must be finite and non-negative")
        if np.any(np.diff(arr) > 0.0):
            raise InvariantViolation("token probabilities must be sorted non-increasing")
        if not isinstance(self.vocab_size, int) or self.vocab_size < 1:
            raise InvariantViolation(f"vocab_size must be a positive integer, got {self.vocab_size!r}")
        if arr.size > self.vocab_size:
            raise InvariantViolation(f"{arr.size} listed tokens exceed vocab_size {self.vocab_size}")
        tail = float(self.tail_mass)
        if not math.isfinite(tail) or tail < 0.0:
            raise InvariantViolation(f"tail_mass must be a non-negative real, got {self.tail_mass!r}")
        if tail > 0.0 and arr.size == self.vocab_size:
            raise InvariantViolation("positive tail_mass with a fully listed vocabulary")
        total = float(arr.sum()) + tail
        if abs(total - 1.0) > MASS_TOL:
            raise InvariantViolation(f"probabilities plus tail sum to {total}, not 1")
        object.__setattr__(self, "probs", arr)
        object.__setattr__(self, "tail_mass", tail)

    @classmethod
    def from_dict(cls, doc: dict) -> "TokenDistribution":
        try:
            return cls(
                np.asarray(doc["probs"], dtype=np.float64),
                int(doc["vocab_size"]),
                float(doc.get("tail_mass", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvariantViolation(f"malformed token distribution: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "probs": self.probs.tolist(),
            "vocab_size": self.vocab_size,
            "tail_mass": self.tail_mass,
        }


@dataclass(frozen=True)
class TokenDistributionSequence:
    """Per-step distributions for one generated answer (T >= 1 steps)."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        if not all(isinstance(s, TokenDistribution) for s in steps):
            raise InvariantViolation("sequence steps must be TokenDistribution values")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def from_dicts(cls, docs) -> "TokenDistributionSequence":
        return cls(tuple(TokenDistribution.from_dict(d) for d in docs))


@dataclass(frozen=True)
class UncertaintyScore:
    """Mean per-token score with its per-token breakdown.

    ``method`` is "top_p" or "entropy"; ``truncated_steps`` indexes steps
    whose listed mass never reached p (top-p only).
    """

    value: float
    per_token: tuple
    method: str
    truncated_steps: tuple = ()

    def __post_init__(self):
        mean = sum(self.per_token) / len(self.per_token)
        if abs(self.value - mean) > 1e-9:
            raise InvariantViolation("score value must equal the per-token mean")


def top_p_set_size(dist: TokenDistribution, p: float | NucleusLevel) -> int:
    """Smallest k whose top-k listed mass reaches p.

    When the listed mass never reaches p (truncated export), returns the
    vocabulary size: the most conservative answer. ``is_truncated_at``
    reports which case occurred.
    """
    level = as_nucleus(p)
    cum = np.cumsum(dist.probs)
    hits = np.nonzero(cum >= level.p)[0]
    if hits.size == 0:
        return dist.vocab_size
    return int(hits[0]) + 1


def is_truncated_at(dist: TokenDistribution, p: float | NucleusLevel) -> bool:
    """True when the listed mass never reaches p, so k fell back to V."""
    level = as_nucleus(p)
    return float(np.cumsum(dist.probs)[-1]) < level.p


def uncertainty_top_p(
    seq: TokenDistributionSequence, p: float | NucleusLevel
) -> UncertaintyScore:
    """Mean top-p set size over the sequence (the quasi-conformal score)."""
    level = as_nucleus(p)
    if len(seq) == 0:
        raise EmptySequence("cannot score an empty sequence")
    sizes = tuple(top_p_set_size(s, level) for s in seq.steps)
    truncated = tuple(i for i, s in enumerate(seq.steps) if is_truncated_at(s, level))
    return UncertaintyScore(
        value=sum(sizes) / len(sizes),
        per_token=sizes,
        method="top_p",
        truncated_steps=truncated,
    )


def _step_entropy(dist: TokenDistribution) -> float:
    # Natural log; 0 * log 0 := 0. A positive tail is treated as uniform
    # over the V - L unlisted tokens (maximum-entropy completion).
    probs = dist.probs
    positive = probs[probs > 0.0]
    h = float(-(positive * np.log(positive)).sum())
    if dist.tail_mass > 0.0:
        unlisted = dist.vocab_size - probs.size
        h += -dist.tail_mass * math.log(dist.tail_mass / unlisted)
    return h


def uncertainty_entropy(seq: TokenDistributionSequence) -> UncertaintyScore:
    """Mean per-step Shannon entropy (natural log) over the sequence."""
    if len(seq) == 0:
        raise EmptySequence("cannot score an empty sequence")
    entropies = tuple(_step_entropy(s) for s in seq.steps)
    return UncertaintyScore(
        value=sum(entropies) / len(entropies),
        per_token=entropies,
        method="entropy",
    )


def score_sequence(
    seq: TokenDistributionSequence, method: str, p: float | NucleusLevel = 0.9
) -> UncertaintyScore:
    """Dispatch to the configured scorer ("top_p" or "entropy")."""
    if method == "top_p":
        return uncertainty_top_p(seq, p)
    if method == "entropy":
        return uncertainty_entropy(seq)
    raise InvariantViolation(f"unknown uncertainty method {method!r}")


def load_trace_jsonl(path) -> TokenDistributionSequence:
    """Read a trace file: one JSON object per line, one line per step."""
    docs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            docs.append(json.loads(line))
    if not docs:
        raise EmptySequence(f"no steps in trace file {path}")
    return TokenDistributionSequence.from_dicts(docs)
