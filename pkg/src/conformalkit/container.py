"""Bit-exact file formats: the grid container, threshold JSON, PGM/PPM.

The grid container is a single binary layout for probability grids (f32),
label grids (u16) and score multisets (f64):

    magic   8 bytes  "CPGRID01"
    kind    1 byte   0 = probability f32, 1 = labels u16, 2 = scores f64
    dims    3 x u32  little-endian H, W, C (C = 1 for labels and scores)
    payload row-major little-endian values, exactly H*W*C elements

Writes go to a temporary name in the target directory followed by an atomic
rename, so concurrent writers over disjoint outputs are safe.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .cp import ConformalThreshold, RiskLevel, ScoreSet
from .detection import DetThreshold
from .errors import (
    BadMagic,
    InvariantViolation,
    IoFailure,
    ManifestError,
    TruncatedPayload,
)
from .segmentation import LabelGrid, ProbabilityGrid

__all__ = [
    "MAGIC",
    "read_grid",
    "write_grid",
    "load_scores",
    "save_threshold",
    "load_threshold",
    "read_pnm",
    "write_pnm",
    "RunManifest",
]

MAGIC = b"CPGRID01"
HEADER = struct.Struct("<8sBIII")

KIND_PROBS = 0
KIND_LABELS = 1
KIND_SCORES = 2

_DTYPES = {
    KIND_PROBS: np.dtype("<f4"),
    KIND_LABELS: np.dtype("<u2"),
    KIND_SCORES: np.dtype("<f8"),
}


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_grid(path, grid) -> None:
    """Serialize a ProbabilityGrid, LabelGrid or ScoreSet to a container file.

    Output bytes are a pure function of the value, so identical inputs give
    byte-identical files. Probabilities narrow to float32 here; callers that
    need the written values must read the file back.
    """
    if isinstance(grid, ProbabilityGrid):
        kind = KIND_PROBS
        h, w, c = grid.probs.shape
        data = np.ascontiguousarray(grid.probs, dtype=_DTYPES[kind])
    elif isinstance(grid, LabelGrid):
        kind = KIND_LABELS
        h, w, c = grid.labels.shape[0], grid.labels.shape[1], 1
        data = np.ascontiguousarray(grid.labels, dtype=_DTYPES[kind])
    elif isinstance(grid, ScoreSet):
        kind = KIND_SCORES
        h, w, c = grid.n, 1, 1
        if h == 0:
            raise InvariantViolation("refusing to write an empty score set")
        data = np.ascontiguousarray(grid.scores, dtype=_DTYPES[kind])
    else:
        raise InvariantViolation(f"cannot serialize {type(grid).__name__} as a grid container")
    header = HEADER.pack(MAGIC, kind, h, w, c)
    _atomic_write(path, header + data.tobytes())


def read_grid(path):
    """Parse a container file into the value its kind byte declares.

    Domain validation (simplex, label range, finiteness) runs on the parsed
    payload, so a malformed file cannot produce an invalid value.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size or raw[:8] != MAGIC:
        raise BadMagic(f"{path} is not a grid container")
    _, kind, h, w, c = HEADER.unpack_from(raw)
    if kind not in _DTYPES:
        raise InvariantViolation(f"unknown container kind {kind}")
    dtype = _DTYPES[kind]
    expected = h * w * c * dtype.itemsize
    body = raw[HEADER.size:]
    if len(body) < expected:
        raise TruncatedPayload(f"{path}: payload is {len(body)} bytes, header declares {expected}")
    if len(body) > expected:
        raise InvariantViolation(f"{path}: {len(body) - expected} trailing bytes after payload")
    values = np.frombuffer(body, dtype=dtype)
    if kind == KIND_PROBS:
        return ProbabilityGrid(values.astype(np.float64).reshape(h, w, c))
    if kind == KIND_LABELS:
        if c != 1:
            raise InvariantViolation("label containers must have C = 1")
        return LabelGrid(values.reshape(h, w).copy())
    if c != 1 or w != 1:
        raise InvariantViolation("score containers must have W = C = 1")
    return ScoreSet(values.copy())


def load_scores(path) -> ScoreSet:
    """Load a score multiset from a container file or a JSON number array."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if not isinstance(doc, list):
            raise InvariantViolation(f"{path}: expected a JSON array of numbers")
        return ScoreSet.from_iterable(doc)
    scores = read_grid(path)
    if not isinstance(scores, ScoreSet):
        raise InvariantViolation(f"{path} holds a grid, not scores")
    return scores


def _num_to_json(v: float):
    # Strict JSON has no Infinity literal; thresholds may be +inf.
    return "inf" if math.isinf(v) else v


def _num_from_json(v) -> float:
    if v == "inf":
        return math.inf
    return float(v)


def save_threshold(path, threshold) -> None:
    """Persist a fitted threshold as human-auditable strict JSON."""
    if isinstance(threshold, ConformalThreshold):
        doc = {
            "kind": "seg",
            "alpha": threshold.alpha.alpha,
            "q": _num_to_json(threshold.value),
            "n": threshold.n,
        }
    elif isinstance(threshold, DetThreshold):
        doc = {
            "kind": "det",
            "alpha": threshold.alpha.alpha,
            "tau": threshold.tau,
            "q": [_num_to_json(v) for v in threshold.q],
            "counts": list(threshold.counts),
        }
    else:
        raise InvariantViolation(f"cannot persist {type(threshold).__name__}")
    _atomic_write(path, (json.dumps(doc) + "\n").encode())


def load_threshold(path):
    """Load a threshold JSON written by save_threshold."""
    try:
        doc = json.loads(Path(path).read_text())
        kind = doc["kind"]
        if kind == "seg":
            return ConformalThreshold(_num_from_json(doc["q"]), RiskLevel(doc["alpha"]), int(doc["n"]))
        if kind == "det":
            return DetThreshold(
                tuple(_num_from_json(v) for v in doc["q"]),
                RiskLevel(doc["alpha"]),
                tuple(doc["counts"]),
                float(doc["tau"]),
            )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InvariantViolation(f"malformed threshold file {path}: {exc}") from exc
    raise InvariantViolation(f"unknown threshold kind {doc['kind']!r} in {path}")


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) image with maxval <= 255.

    Returns uint8 arrays: H x W for grayscale, H x W x 3 for color.
    """
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P6"):
        raise BadMagic(f"{path} is not a binary PGM/PPM image")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise TruncatedPayload(f"{path}: header ended early")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise InvariantViolation(f"{path}: only 8-bit rasters supported, maxval={maxval}")
    channels = 1 if raw[:2] == b"P5" else 3
    expected = width * height * channels
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise TruncatedPayload(f"{path}: {len(body)} pixel bytes, expected {expected}")
    pixels = np.frombuffer(body, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write a uint8 image as binary PGM (2-D input) or PPM (H x W x 3)."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    else:
        raise InvariantViolation(f"cannot write image of shape {arr.shape}")
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    _atomic_write(path, header + arr.tobytes())


class RunManifest:
    """Parsed pipeline configuration document.

    A manifest is one JSON object; statistical parameters (alpha, p, tau)
    are plain numbers and cannot be overridden by the environment, while
    path-valued fields go through ``${VAR}`` expansion so deployments can
    relocate fixtures without touching the audited numbers.
    """

    def __init__(self, doc: dict, base_dir: Path):
        self.base_dir = Path(base_dir)
        self.seed = int(doc.get("seed", 0))
        self.p = float(doc.get("p", 0.9))
        self.uq_method = doc.get("uq_method", "top_p")
        self.tau = float(doc.get("tau", 0.5))
        self.class_names = doc.get("class_names")
        alphas = doc.get("alpha", {})
        self.alpha_seg = float(alphas.get("segmentation", 0.1))
        self.alpha_det = float(alphas.get("detection", 0.1))
        self.pathways = doc.get("pathways", [])
        if not 0.0 < self.p <= 1.0:
            raise ManifestError(f"p = {self.p} outside (0, 1]")
        for name, a in (("segmentation", self.alpha_seg), ("detection", self.alpha_det)):
            if not 0.0 < a < 1.0:
                raise ManifestError(f"alpha.{name} = {a} outside (0, 1)")
        if self.uq_method not in ("top_p", "entropy"):
            raise ManifestError(f"uq_method must be top_p or entropy, got {self.uq_method!r}")
        for pathway in self.pathways:
            for key in ("id", "kind", "tool_command", "reasoning_command"):
                if key not in pathway:
                    raise ManifestError(f"pathway missing {key!r}: {pathway}")
            if pathway["kind"] not in ("segmentation", "detection"):
                raise ManifestError(f"unknown pathway kind {pathway['kind']!r}")

    def resolve(self, value: str) -> Path:
        """Expand ${VAR} references and anchor relative paths at the manifest."""
        expanded = os.path.expandvars(value)
        path = Path(expanded)
        if not path.is_absolute():
            path = self.base_dir / path
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot load manifest {path}: {exc}") from exc
        manifest = cls(doc, path.parent)
        for pathway in manifest.pathways:
            ref = pathway.get("threshold")
            if ref is not None and not manifest.resolve(ref).exists():
                raise ManifestError(f"pathway {pathway['id']!r} references missing threshold {ref}")
        return manifest
