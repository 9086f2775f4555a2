"""Two-stage tool orchestration with minimum-uncertainty answer selection.

Stage 1 calls a vision-tool adapter, calibrates its output with the fitted
conformal threshold, renders the result as a text report, and asks a
reasoning adapter to pick region-of-interest object ids. The selected region
is cropped out of the source image and handed back to the reasoning adapter
in stage 2, whose answer is scored by the configured sequence-uncertainty
method. The pathway with the smallest score wins; a failing pathway is
dropped, never fatal, as long as one survives.

Adapters are external executables: one JSON request on stdin, one JSON
response on stdout (see conformalkit.adapters for the bundled synthetic
ones).
"""

from __future__ import annotations

import json
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import RunManifest, load_threshold, read_grid, read_pnm, write_pnm
from .cp import ConformalThreshold
from .detection import Box, DetectionList, DetThreshold, conformalize_detections
from .errors import (
    AdapterFailure,
    ConformalKitError,
    DimensionMismatch,
    EmptyRegion,
    InvariantViolation,
    NoViablePathway,
    SelectionParseError,
    TraceMissing,
)
from .segmentation import LabelGrid, ProbabilityGrid, calibrate_label_grid, label_objects
from .sequence import TokenDistributionSequence, score_sequence

__all__ = [
    "DEFAULT_PROMPT_ROI",
    "DEFAULT_PROMPT_ANSWER",
    "PathwayConfig",
    "ToolReport",
    "RoISelection",
    "RoIImage",
    "PathwayAnswer",
    "Stage1Result",
    "PipelineResult",
    "call_adapter",
    "run_stage1",
    "extract_roi_seg",
    "extract_roi_det",
    "run_stage2",
    "select_answer",
    "run_pipeline",
]

DEFAULT_PROMPT_ROI = (
    "Consider the semantic, location, size and confidence relationships "
    "between all objects and how they relate to the question. Reply with a "
    "JSON array of the ids of the objects worth focusing on."
)
DEFAULT_PROMPT_ANSWER = (
    "Use the cropped key area together with the full image to reason from "
    "coarse to fine, then state a short final answer."
)


@dataclass(frozen=True)
class PathwayConfig:
    """One tool-plus-reasoning route through the pipeline."""

    pathway_id: str
    tool_kind: str  # "segmentation" | "detection"
    tool_command: tuple
    reasoning_command: tuple
    threshold: ConformalThreshold | DetThreshold
    prompt_roi: str = DEFAULT_PROMPT_ROI
    prompt_answer: str = DEFAULT_PROMPT_ANSWER
    class_names: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "tool_command", tuple(self.tool_command))
        object.__setattr__(self, "reasoning_command", tuple(self.reasoning_command))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        expected = {"segmentation": ConformalThreshold, "detection": DetThreshold}
        if self.tool_kind not in expected:
            raise InvariantViolation(f"unknown tool kind {self.tool_kind!r}")
        if not isinstance(self.threshold, expected[self.tool_kind]):
            raise InvariantViolation(
                f"{self.tool_kind} pathway needs a {expected[self.tool_kind].__name__}, "
                f"got {type(self.threshold).__name__}"
            )

    @classmethod
    def from_manifest(cls, manifest: RunManifest) -> list["PathwayConfig"]:
        configs = []
        for doc in manifest.pathways:
            configs.append(
                cls(
                    pathway_id=doc["id"],
                    tool_kind=doc["kind"],
                    tool_command=tuple(doc["tool_command"]),
                    reasoning_command=tuple(doc["reasoning_command"]),
                    threshold=load_threshold(manifest.resolve(doc["threshold"])),
                    prompt_roi=doc.get("prompt_roi", DEFAULT_PROMPT_ROI),
                    prompt_answer=doc.get("prompt_answer", DEFAULT_PROMPT_ANSWER),
                    class_names=tuple(manifest.class_names) if manifest.class_names else None,
                )
            )
        return configs


@dataclass(frozen=True)
class ToolReport:
    """Calibrated tool output in its text (JSON) report form."""

    kind: str
    objects: tuple = ()  # SegObject entries (segmentation only)
    detections: DetectionList | None = None

    def object_ids(self) -> list:
        if self.kind == "segmentation":
            return [o.object_id for o in self.objects]
        return list(range(len(self.detections)))

    def to_json(self) -> dict:
        if self.kind == "segmentation":
            return {"objects": [o.to_json() for o in self.objects]}
        # The detection report format is the detection-list document itself.
        return self.detections.to_json()


@dataclass(frozen=True)
class RoISelection:
    """Object ids the reasoning adapter picked, with its raw reply."""

    selected_ids: tuple
    rationale: str = ""

    def __post_init__(self):
        if not self.selected_ids:
            raise SelectionParseError("a selection must name at least one object id")
        object.__setattr__(self, "selected_ids", tuple(self.selected_ids))


@dataclass(frozen=True)
class RoIImage:
    """Cropped region of interest plus its offset in the source image."""

    pixels: np.ndarray = field(repr=False)
    origin: tuple = (0, 0)  # (x, y) of the crop's top-left corner

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PathwayAnswer:
    pathway_id: str
    answer_text: str
    token_trace: TokenDistributionSequence
    us: object  # UncertaintyScore


@dataclass(frozen=True)
class Stage1Result:
    report: ToolReport
    selection: RoISelection
    object_grid: np.ndarray | None = None  # segmentation only
    grid_file: str | None = None

    def __iter__(self):
        return iter((self.report, self.selection))


@dataclass(frozen=True)
class PipelineResult:
    answer: PathwayAnswer
    trace: dict
    trace_path: Path | None = None


def call_adapter(command, request: dict, timeout: float = 120.0) -> dict:
    """Run one adapter round trip; malformed replies become AdapterFailure."""
    try:
        proc = subprocess.run(
            list(command),
            input=json.dumps(request).encode(),
            capture_output=True,
            timeout=timeout,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AdapterFailure(f"adapter {command[0]!r} did not run: {exc}") from exc
    if proc.returncode != 0:
        detail = proc.stderr.decode(errors="replace").strip()[-400:]
        raise AdapterFailure(f"adapter {command[0]!r} exited {proc.returncode}: {detail}")
    try:
        doc = json.loads(proc.stdout.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdapterFailure(f"adapter {command[0]!r} replied with malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise AdapterFailure(f"adapter {command[0]!r} replied with {type(doc).__name__}, not an object")
    return doc


_ARRAY = re.compile(r"\[[^\[\]]*\]")


def parse_selection(reply_text: str, valid_ids) -> RoISelection:
    """Extract object ids from free-form reply text.

    The first JSON array of integers wins (robust to surrounding
    chain-of-thought prose); ids absent from the report are discarded, and
    the selection fails only when nothing valid remains.
    """
    valid = set(valid_ids)
    for candidate in _ARRAY.finditer(reply_text):
        try:
            parsed = json.loads(candidate.group(0))
        except json.JSONDecodeError:
            continue
        if not parsed or not all(isinstance(v, int) and not isinstance(v, bool) for v in parsed):
            continue
        kept = [v for v in parsed if v in valid]
        if kept:
            return RoISelection(tuple(kept), rationale=reply_text)
        raise SelectionParseError(f"reply ids {parsed} name no object in the report")
    raise SelectionParseError("no JSON array of object ids found in the reply")


def _calibrated_report(pathway: PathwayConfig, tool_reply: dict, image: np.ndarray):
    if pathway.tool_kind == "segmentation":
        grid_file = tool_reply.get("grid")
        if not isinstance(grid_file, str):
            raise AdapterFailure("segmentation tool reply lacks a 'grid' file path")
        grid = read_grid(grid_file)
        if not isinstance(grid, ProbabilityGrid):
            raise AdapterFailure(f"{grid_file} does not hold a probability grid")
        if (grid.height, grid.width) != image.shape[:2]:
            raise DimensionMismatch(
                f"tool grid is {grid.height}x{grid.width} but the image is "
                f"{image.shape[0]}x{image.shape[1]}"
            )
        labels = calibrate_label_grid(grid, pathway.threshold)
        objects, object_grid = label_objects(labels, list(pathway.class_names) if pathway.class_names else None)
        report = ToolReport(kind="segmentation", objects=tuple(objects))
        return report, object_grid, grid_file
    detections = DetectionList.from_json(tool_reply)
    h, w = image.shape[:2]
    calibrated = conformalize_detections(detections, pathway.threshold, bounds=Box(0.0, 0.0, float(w), float(h)))
    return ToolReport(kind="detection", detections=calibrated), None, None


def run_stage1(image_path, question: str, pathway: PathwayConfig, out_dir) -> Stage1Result:
    """Tool call, conformal calibration, and RoI selection."""
    out_dir = Path(out_dir)
    image = read_pnm(image_path)
    tool_reply = call_adapter(
        pathway.tool_command,
        {
            "op": "segment" if pathway.tool_kind == "segmentation" else "detect",
            "pathway_id": pathway.pathway_id,
            "image": str(image_path),
            "question": question,
            "output_dir": str(out_dir),
        },
    )
    report, object_grid, grid_file = _calibrated_report(pathway, tool_reply, image)
    reason_reply = call_adapter(
        pathway.reasoning_command,
        {
            "op": "select_roi",
            "pathway_id": pathway.pathway_id,
            "question": question,
            "prompt": pathway.prompt_roi,
            "kind": pathway.tool_kind,
            "report": report.to_json(),
        },
    )
    text = reason_reply.get("text")
    if not isinstance(text, str):
        raise AdapterFailure("reasoning reply lacks 'text'")
    selection = parse_selection(text, report.object_ids())
    return Stage1Result(report, selection, object_grid, grid_file)


def extract_roi_seg(image: np.ndarray, object_grid, selection: RoISelection) -> RoIImage:
    """Pixel-mask extraction: keep selected objects, crop to their extent.

    ``object_grid`` assigns each pixel the object id it belongs to (0 for
    none); unselected pixels inside the crop are filled with black.
    """
    grid = object_grid.labels if isinstance(object_grid, LabelGrid) else np.asarray(object_grid)
    if grid.shape != image.shape[:2]:
        raise DimensionMismatch(
            f"object grid {grid.shape} does not match image {image.shape[:2]}"
        )
    mask = np.isin(grid, np.asarray(selection.selected_ids))
    if not mask.any():
        raise EmptyRegion(f"selected objects {selection.selected_ids} cover no pixels")
    ys, xs = np.nonzero(mask)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    crop = image[y0:y1, x0:x1].copy()
    crop[~mask[y0:y1, x0:x1]] = 0
    return RoIImage(crop, origin=(x0, y0))


def extract_roi_det(image: np.ndarray, report: ToolReport, selection: RoISelection) -> RoIImage:
    """Bounding-box extraction: crop the envelope of the selected boxes."""
    if report.kind != "detection":
        raise InvariantViolation("extract_roi_det needs a detection report")
    boxes = [report.detections.boxes[i] for i in selection.selected_ids]
    x_min = min(b.x_min for b in boxes)
    y_min = min(b.y_min for b in boxes)
    x_max = max(b.x_max for b in boxes)
    y_max = max(b.y_max for b in boxes)
    h, w = image.shape[:2]
    x0 = max(int(np.floor(x_min)), 0)
    y0 = max(int(np.floor(y_min)), 0)
    x1 = min(int(np.ceil(x_max)), w)
    y1 = min(int(np.ceil(y_max)), h)
    if x0 >= x1 or y0 >= y1:
        raise EmptyRegion(f"selected boxes fall outside the {w}x{h} image")
    return RoIImage(image[y0:y1, x0:x1].copy(), origin=(x0, y0))


def run_stage2(
    image_path,
    question: str,
    roi: RoIImage,
    pathway: PathwayConfig,
    out_dir,
    uq_method: str = "top_p",
    p: float = 0.9,
) -> PathwayAnswer:
    """Final answer generation plus uncertainty scoring."""
    out_dir = Path(out_dir)
    roi_name = f"{pathway.pathway_id}_roi.pgm" if roi.pixels.ndim == 2 else f"{pathway.pathway_id}_roi.ppm"
    roi_path = out_dir / roi_name
    write_pnm(roi_path, roi.pixels)
    reply = call_adapter(
        pathway.reasoning_command,
        {
            "op": "answer",
            "pathway_id": pathway.pathway_id,
            "question": question,
            "prompt": pathway.prompt_answer,
            "image": str(image_path),
            "roi": str(roi_path),
            "roi_origin": [int(roi.origin[0]), int(roi.origin[1])],
        },
    )
    text = reply.get("text")
    if not isinstance(text, str):
        raise AdapterFailure("reasoning reply lacks 'text'")
    trace_docs = reply.get("trace")
    if not trace_docs:
        raise TraceMissing(f"pathway {pathway.pathway_id!r} returned no token trace")
    trace = TokenDistributionSequence.from_dicts(trace_docs)
    us = score_sequence(trace, uq_method, p)
    return PathwayAnswer(pathway.pathway_id, text, trace, us)


def select_answer(answers: list[PathwayAnswer]) -> PathwayAnswer:
    """Minimum-uncertainty answer; ties break toward registration order."""
    if not answers:
        raise NoViablePathway("no pathway produced an answer")
    best = answers[0]
    for answer in answers[1:]:
        if answer.us.value < best.us.value:
            best = answer
    return best


def _run_one_pathway(image_path, question, pathway, out_dir, uq_method, p):
    stage1 = run_stage1(image_path, question, pathway, out_dir)
    image = read_pnm(image_path)
    if pathway.tool_kind == "segmentation":
        roi = extract_roi_seg(image, stage1.object_grid, stage1.selection)
    else:
        roi = extract_roi_det(image, stage1.report, stage1.selection)
    answer = run_stage2(image_path, question, roi, pathway, out_dir, uq_method, p)
    return stage1, roi, answer


def run_pipeline(
    image_path,
    question: str,
    pathways: list[PathwayConfig],
    out_dir,
    uq_method: str = "top_p",
    p: float = 0.9,
    parallel: bool = False,
) -> PipelineResult:
    """Execute every pathway independently, then pick the lowest-uncertainty
    answer.

    A pathway that raises a toolkit error is dropped and recorded in the
    trace; the run fails only when nothing survives. With scripted, seeded
    adapters the trace document (and every file written under ``out_dir``)
    is a pure function of the inputs.
    """
    if not pathways:
        raise NoViablePathway("no pathways configured")
    ids = [p.pathway_id for p in pathways]
    if len(set(ids)) != len(ids):
        raise InvariantViolation(f"duplicate pathway ids in {ids}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def attempt(pathway):
        try:
            return _run_one_pathway(image_path, question, pathway, out_dir, uq_method, p)
        except ConformalKitError as exc:
            return exc

    if parallel:
        with ThreadPoolExecutor(max_workers=len(pathways)) as pool:
            outcomes = list(pool.map(attempt, pathways))
    else:
        outcomes = [attempt(p) for p in pathways]

    answers = []
    pathway_traces = []
    for pathway, outcome in zip(pathways, outcomes):
        if isinstance(outcome, ConformalKitError):
            pathway_traces.append(
                {
                    "pathway_id": pathway.pathway_id,
                    "status": "failed",
                    "error": outcome.code,
                    "message": str(outcome),
                }
            )
            continue
        stage1, roi, answer = outcome
        answers.append(answer)
        pathway_traces.append(
            {
                "pathway_id": pathway.pathway_id,
                "status": "ok",
                "tool_kind": pathway.tool_kind,
                "report": stage1.report.to_json(),
                "selection": {
                    "ids": list(stage1.selection.selected_ids),
                    "rationale": stage1.selection.rationale,
                },
                "roi": {
                    "file": f"{pathway.pathway_id}_roi.{'pgm' if roi.pixels.ndim == 2 else 'ppm'}",
                    "origin": [int(roi.origin[0]), int(roi.origin[1])],
                    "height": roi.height,
                    "width": roi.width,
                },
                "answer": {
                    "text": answer.answer_text,
                    "us": answer.us.value,
                    "method": answer.us.method,
                    "per_token": list(answer.us.per_token),
                },
            }
        )

    if not answers:
        raise NoViablePathway(
            "all pathways failed: "
            + "; ".join(f"{t['pathway_id']}={t['error']}" for t in pathway_traces)
        )
    best = select_answer(answers)
    trace = {
        "image": Path(image_path).name,
        "question": question,
        "uq_method": uq_method,
        "p": p,
        "pathways": pathway_traces,
        "selected": best.pathway_id,
        "answer": best.answer_text,
        "us": best.us.value,
    }
    trace_path = out_dir / "trace.json"
    trace_path.write_text(json.dumps(trace, indent=2) + "\n")
    return PipelineResult(best, trace, trace_path)
