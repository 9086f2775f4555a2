import math
import sys

import numpy as np
import pytest

from conformalkit.container import write_grid, write_pnm
from conformalkit.cp import ConformalThreshold, RiskLevel
from conformalkit.detection import Box, DetectionList, DetThreshold
from conformalkit.errors import (
    AdapterFailure,
    EmptyRegion,
    InvariantViolation,
    NoViablePathway,
    SelectionParseError,
    TraceMissing,
)
from conformalkit.pipeline import (
    PathwayAnswer,
    PathwayConfig,
    RoIImage,
    RoISelection,
    ToolReport,
    call_adapter,
    extract_roi_det,
    extract_roi_seg,
    parse_selection,
    run_pipeline,
    run_stage1,
    run_stage2,
    select_answer,
)
from conformalkit.segmentation import ProbabilityGrid
from conformalkit.sequence import TokenDistribution, TokenDistributionSequence, UncertaintyScore

SEG_T = ConformalThreshold(0.2, RiskLevel(0.1), 100)
DET_T = DetThreshold((1.0, 2.0, 3.0, 4.0), RiskLevel(0.1), (100,) * 4, 0.5)

TWO_STEP_TRACE = [
    {"probs": [0.5, 0.3, 0.2], "vocab_size": 3, "tail_mass": 0.0},
    {"probs": [0.6, 0.35, 0.05], "vocab_size": 3, "tail_mass": 0.0},
]
ONE_HOT_TRACE = [{"probs": [1.0], "vocab_size": 4, "tail_mass": 0.0}]


def seg_pathway(tool_command, reasoning_command, threshold=SEG_T, pid="seg"):
    return PathwayConfig(pid, "segmentation", tool_command, reasoning_command, threshold)


def det_pathway(tool_command, reasoning_command, threshold=DET_T, pid="det"):
    return PathwayConfig(pid, "detection", tool_command, reasoning_command, threshold)


class TestParseSelection:
    def test_first_integer_array_wins(self):
        sel = parse_selection("let me think... ids: [2] or maybe [3]", [1, 2, 3])
        assert sel.selected_ids == (2,)

    def test_absent_id_is_an_error(self):
        with pytest.raises(SelectionParseError):
            parse_selection("ids: [9]", [1, 2])

    def test_mixed_ids_keep_the_valid_ones(self):
        sel = parse_selection("[2, 9]", [1, 2])
        assert sel.selected_ids == (2,)

    def test_no_array_is_an_error(self):
        with pytest.raises(SelectionParseError):
            parse_selection("I would focus on the cat", [1])

    def test_non_integer_arrays_skipped(self):
        sel = parse_selection('["a", 1] then [1]', [1])
        assert sel.selected_ids == (1,)

    def test_empty_array_skipped(self):
        with pytest.raises(SelectionParseError):
            parse_selection("[]", [1])

    def test_booleans_are_not_ids(self):
        with pytest.raises(SelectionParseError):
            parse_selection("[true]", [1])


class TestCallAdapter:
    def test_nonzero_exit(self):
        cmd = (sys.executable, "-m", "conformalkit.adapters", "fail", "--exit-code", "3")
        with pytest.raises(AdapterFailure):
            call_adapter(cmd, {"op": "x"})

    def test_malformed_reply(self):
        cmd = (sys.executable, "-m", "conformalkit.adapters", "fail", "--malformed")
        with pytest.raises(AdapterFailure):
            call_adapter(cmd, {"op": "x"})

    def test_missing_binary(self):
        with pytest.raises(AdapterFailure):
            call_adapter(("/no/such/binary",), {})


class TestExtractRoiSeg:
    def test_whole_image_selection(self, gray_image):
        _, pixels = gray_image
        grid = np.ones(pixels.shape, dtype=np.uint16)
        roi = extract_roi_seg(pixels, grid, RoISelection((1,)))
        assert roi.origin == (0, 0)
        np.testing.assert_array_equal(roi.pixels, pixels)

    def test_tight_crop_of_small_object(self):
        image = np.arange(100, dtype=np.uint8).reshape(10, 10)
        grid = np.zeros((10, 10), dtype=np.uint16)
        grid[4:7, 2:5] = 1
        roi = extract_roi_seg(image, grid, RoISelection((1,)))
        assert roi.origin == (2, 4)
        assert roi.pixels.shape == (3, 3)
        np.testing.assert_array_equal(roi.pixels, image[4:7, 2:5])

    def test_unselected_pixels_masked_black(self):
        image = np.full((4, 4), 200, dtype=np.uint8)
        grid = np.zeros((4, 4), dtype=np.uint16)
        grid[0, 0] = 1
        grid[0, 3] = 1
        grid[1, 1] = 2
        roi = extract_roi_seg(image, grid, RoISelection((1,)))
        assert roi.pixels.shape == (1, 4)
        assert roi.pixels.tolist() == [[200, 0, 0, 200]]

    def test_empty_selection_region(self):
        image = np.zeros((4, 4), dtype=np.uint8)
        grid = np.zeros((4, 4), dtype=np.uint16)
        with pytest.raises(EmptyRegion):
            extract_roi_seg(image, grid, RoISelection((5,)))

    def test_union_of_two_objects(self):
        image = np.arange(64, dtype=np.uint8).reshape(8, 8)
        grid = np.zeros((8, 8), dtype=np.uint16)
        grid[1, 1] = 1
        grid[6, 6] = 2
        roi = extract_roi_seg(image, grid, RoISelection((1, 2)))
        assert roi.origin == (1, 1)
        assert roi.pixels.shape == (6, 6)
        assert roi.pixels[0, 0] == image[1, 1]
        assert roi.pixels[5, 5] == image[6, 6]
        assert roi.pixels[0, 5] == 0  # masked corner


class TestExtractRoiDet:
    def report(self, *boxes):
        return ToolReport(kind="detection", detections=DetectionList(tuple(Box(*b) for b in boxes)))

    def test_single_box_crop(self):
        image = np.arange(100, dtype=np.uint8).reshape(10, 10)
        roi = extract_roi_det(image, self.report((2, 3, 5, 6)), RoISelection((0,)))
        assert roi.origin == (2, 3)
        np.testing.assert_array_equal(roi.pixels, image[3:6, 2:5])

    def test_enclosing_rectangle(self):
        image = np.zeros((10, 10), dtype=np.uint8)
        roi = extract_roi_det(image, self.report((0, 0, 2, 2), (3, 3, 5, 5)), RoISelection((0, 1)))
        assert roi.origin == (0, 0)
        assert roi.pixels.shape == (5, 5)

    def test_out_of_bounds_box(self):
        image = np.zeros((10, 10), dtype=np.uint8)
        roi_report = ToolReport(
            kind="detection", detections=DetectionList((Box(20, 20, 30, 30),))
        )
        with pytest.raises(EmptyRegion):
            extract_roi_det(image, roi_report, RoISelection((0,)))

    def test_crop_clipped_to_image(self):
        image = np.zeros((10, 10), dtype=np.uint8)
        roi = extract_roi_det(image, self.report((7.5, 7.5, 14, 14)), RoISelection((0,)))
        assert roi.origin == (7, 7)
        assert roi.pixels.shape == (3, 3)


class TestStage1:
    def test_seg_round_trip_with_scripted_reasoner(self, tmp_path, gray_image, scripted_adapter):
        image_path, pixels = gray_image
        h, w = pixels.shape
        probs = np.zeros((h, w, 3))
        probs[:, :, 0] = 0.9
        probs[:, :, 1] = 0.06
        probs[:, :, 2] = 0.04
        probs[2:5, 2:5] = [0.05, 0.9, 0.05]
        probs[7:10, 9:14] = [0.05, 0.05, 0.9]
        grid_path = tmp_path / "tool.grid"
        write_grid(grid_path, ProbabilityGrid(probs))
        tool = scripted_adapter([
            {"match": {"op": "segment"}, "response": {"grid": str(grid_path)}},
        ])
        reason = scripted_adapter([
            {"match": {"op": "select_roi"}, "response": {"text": "ids: [2]"}},
        ])
        result = run_stage1(image_path, "what?", seg_pathway(tool, reason), tmp_path)
        assert [o.object_id for o in result.report.objects] == [1, 2]
        assert result.selection.selected_ids == (2,)
        assert result.object_grid is not None

    def test_det_boxes_are_conformalized(self, tmp_path, scripted_adapter):
        img = tmp_path / "big.pgm"
        write_pnm(img, np.zeros((40, 40), dtype=np.uint8))
        raw = {"boxes": [{"id": 0, "class": 1, "confidence": 0.9,
                          "x_min": 10.0, "y_min": 10.0, "x_max": 20.0, "y_max": 20.0}]}
        tool = scripted_adapter([{"match": {"op": "detect"}, "response": raw}])
        reason = scripted_adapter([{"match": {"op": "select_roi"}, "response": {"text": "[0]"}}])
        result = run_stage1(img, "what?", det_pathway(tool, reason), tmp_path)
        assert result.report.detections.boxes[0] == Box(9.0, 8.0, 23.0, 24.0)

    def test_invalid_selection_id_raises(self, tmp_path, scripted_adapter, gray_image):
        image_path, pixels = gray_image
        raw = {"boxes": [{"id": 0, "class": 1, "confidence": None,
                          "x_min": 1.0, "y_min": 1.0, "x_max": 5.0, "y_max": 5.0}]}
        tool = scripted_adapter([{"match": {"op": "detect"}, "response": raw}])
        reason = scripted_adapter([{"match": {"op": "select_roi"}, "response": {"text": "[7]"}}])
        with pytest.raises(SelectionParseError):
            run_stage1(image_path, "what?", det_pathway(tool, reason), image_path.parent)

    def test_threshold_kind_must_match(self):
        with pytest.raises(InvariantViolation):
            PathwayConfig("x", "segmentation", ("true",), ("true",), DET_T)


class TestStage2:
    def roi(self):
        return RoIImage(np.zeros((3, 3), dtype=np.uint8), origin=(1, 1))

    def test_one_hot_trace_scores_one(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        reason = scripted_adapter([
            {"match": {"op": "answer"}, "response": {"text": "a cat", "trace": ONE_HOT_TRACE}},
        ])
        answer = run_stage2(image_path, "q", self.roi(), seg_pathway(("true",), reason), tmp_path)
        assert answer.answer_text == "a cat"
        assert answer.us.value == 1.0

    def test_two_step_trace_scores_two_and_a_half(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        reason = scripted_adapter([
            {"match": {"op": "answer"}, "response": {"text": "hm", "trace": TWO_STEP_TRACE}},
        ])
        answer = run_stage2(image_path, "q", self.roi(), seg_pathway(("true",), reason), tmp_path)
        assert answer.us.value == 2.5

    def test_missing_trace(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        reason = scripted_adapter([
            {"match": {"op": "answer"}, "response": {"text": "no trace here"}},
        ])
        with pytest.raises(TraceMissing):
            run_stage2(image_path, "q", self.roi(), seg_pathway(("true",), reason), tmp_path)

    def test_roi_file_written(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        reason = scripted_adapter([
            {"match": {"op": "answer"}, "response": {"text": "ok", "trace": ONE_HOT_TRACE}},
        ])
        run_stage2(image_path, "q", self.roi(), seg_pathway(("true",), reason, pid="segx"), tmp_path)
        assert (tmp_path / "segx_roi.pgm").exists()


def answer(pid, us_value):
    trace = TokenDistributionSequence((TokenDistribution(np.array([1.0]), 1),))
    us = UncertaintyScore(value=float(us_value), per_token=(float(us_value),), method="top_p")
    return PathwayAnswer(pid, f"answer from {pid}", trace, us)


class TestSelectAnswer:
    def test_lower_us_wins(self):
        assert select_answer([answer("seg", 2.5), answer("det", 1.8)]).pathway_id == "det"

    def test_single_answer(self):
        assert select_answer([answer("only", 3.0)]).pathway_id == "only"

    def test_tie_breaks_to_first_registered(self):
        assert select_answer([answer("a", 2.0), answer("b", 2.0)]).pathway_id == "a"

    def test_empty_raises(self):
        with pytest.raises(NoViablePathway):
            select_answer([])

    def test_argmin_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            values = rng.uniform(1, 9, size=4)
            answers = [answer(f"p{i}", v) for i, v in enumerate(values)]
            transformed = [answer(f"p{i}", math.exp(v) + 3) for i, v in enumerate(values)]
            assert select_answer(answers).pathway_id == select_answer(transformed).pathway_id


def oracle_commands(seed_reason=3):
    seg_tool = (sys.executable, "-m", "conformalkit.adapters", "seg-oracle", "--seed", "11")
    det_tool = (sys.executable, "-m", "conformalkit.adapters", "det-oracle", "--seed", "12")
    reason = (sys.executable, "-m", "conformalkit.adapters", "reason-oracle", "--seed", str(seed_reason))
    return seg_tool, det_tool, reason


class TestRunPipeline:
    def test_lower_us_pathway_wins(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        raw = {"boxes": [{"id": 0, "class": 1, "confidence": 0.8,
                          "x_min": 2.0, "y_min": 2.0, "x_max": 9.0, "y_max": 9.0}]}
        det_tool = scripted_adapter([{"match": {"op": "detect"}, "response": raw}])
        det_reason = scripted_adapter([
            {"match": {"op": "select_roi"}, "response": {"text": "[0]"}},
            {"match": {"op": "answer"}, "response": {"text": "det answer", "trace": ONE_HOT_TRACE}},
        ])
        seg_tool, _, _ = oracle_commands()
        seg_reason = scripted_adapter([
            {"match": {"op": "select_roi"}, "response": {"text": "[1]"}},
            {"match": {"op": "answer"}, "response": {"text": "seg answer", "trace": TWO_STEP_TRACE}},
        ])
        pathways = [
            seg_pathway(seg_tool, seg_reason, ConformalThreshold(0.6, RiskLevel(0.1), 100)),
            det_pathway(det_tool, det_reason, DetThreshold((0.5,) * 4, RiskLevel(0.1), (10,) * 4)),
        ]
        result = run_pipeline(image_path, "what?", pathways, tmp_path / "run")
        assert result.answer.pathway_id == "det"
        assert result.answer.answer_text == "det answer"
        assert result.trace["selected"] == "det"
        assert result.trace["pathways"][0]["answer"]["us"] == 2.5
        assert (tmp_path / "run" / "trace.json").exists()

    def test_failing_pathway_degrades_gracefully(self, tmp_path, scripted_adapter, gray_image):
        image_path, _ = gray_image
        broken_tool = (sys.executable, "-m", "conformalkit.adapters", "fail", "--exit-code", "3")
        raw = {"boxes": [{"id": 0, "class": 1, "confidence": 0.8,
                          "x_min": 2.0, "y_min": 2.0, "x_max": 9.0, "y_max": 9.0}]}
        det_tool = scripted_adapter([{"match": {"op": "detect"}, "response": raw}])
        det_reason = scripted_adapter([
            {"match": {"op": "select_roi"}, "response": {"text": "[0]"}},
            {"match": {"op": "answer"}, "response": {"text": "survivor", "trace": ONE_HOT_TRACE}},
        ])
        pathways = [
            seg_pathway(broken_tool, det_reason),
            det_pathway(det_tool, det_reason, DetThreshold((0.5,) * 4, RiskLevel(0.1), (10,) * 4)),
        ]
        result = run_pipeline(image_path, "q", pathways, tmp_path / "run")
        assert result.answer.answer_text == "survivor"
        statuses = {t["pathway_id"]: t["status"] for t in result.trace["pathways"]}
        assert statuses == {"seg": "failed", "det": "ok"}
        assert result.trace["pathways"][0]["error"] == "AdapterFailure"

    def test_all_pathways_failing_raises(self, tmp_path, gray_image):
        image_path, _ = gray_image
        broken = (sys.executable, "-m", "conformalkit.adapters", "fail")
        with pytest.raises(NoViablePathway):
            run_pipeline(image_path, "q", [seg_pathway(broken, broken)], tmp_path / "run")

    def test_zero_pathways_raises(self, tmp_path, gray_image):
        image_path, _ = gray_image
        with pytest.raises(NoViablePathway):
            run_pipeline(image_path, "q", [], tmp_path / "run")

    def test_oracle_pathways_deterministic(self, tmp_path, gray_image):
        image_path, _ = gray_image
        seg_tool, det_tool, reason = oracle_commands()
        pathways = [
            seg_pathway(seg_tool, reason, ConformalThreshold(0.6, RiskLevel(0.1), 100)),
            det_pathway(det_tool, reason, DetThreshold((1.0,) * 4, RiskLevel(0.1), (10,) * 4)),
        ]
        a = run_pipeline(image_path, "q", pathways, tmp_path / "a")
        b = run_pipeline(image_path, "q", pathways, tmp_path / "b")
        assert (tmp_path / "a" / "trace.json").read_bytes() == (tmp_path / "b" / "trace.json").read_bytes()

    def test_parallel_matches_sequential(self, tmp_path, gray_image):
        image_path, _ = gray_image
        seg_tool, det_tool, reason = oracle_commands()
        pathways = [
            seg_pathway(seg_tool, reason, ConformalThreshold(0.6, RiskLevel(0.1), 100)),
            det_pathway(det_tool, reason, DetThreshold((1.0,) * 4, RiskLevel(0.1), (10,) * 4)),
        ]
        seq = run_pipeline(image_path, "q", pathways, tmp_path / "s", parallel=False)
        par = run_pipeline(image_path, "q", pathways, tmp_path / "p", parallel=True)
        assert seq.answer.pathway_id == par.answer.pathway_id
        assert seq.trace["pathways"] == par.trace["pathways"]

    def test_duplicate_pathway_ids_rejected(self, tmp_path, gray_image):
        image_path, _ = gray_image
        cmd = ("true",)
        pathways = [seg_pathway(cmd, cmd, pid="x"), seg_pathway(cmd, cmd, pid="x")]
        with pytest.raises(InvariantViolation):
            run_pipeline(image_path, "q", pathways, tmp_path / "run")
