import json
import math
import sys

import numpy as np
import pytest

from conformalkit.cli import main
from conformalkit.container import load_threshold, read_grid, write_grid, write_pnm
from conformalkit.segmentation import LabelGrid
from conformalkit import synth


@pytest.fixture
def run_cli(capsys):
    def invoke(*argv):
        code = main(list(argv))
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return invoke


@pytest.fixture
def seg_calib_dir(tmp_path):
    rng = np.random.default_rng(61)
    calib = tmp_path / "calib"
    calib.mkdir()
    for i, pair in enumerate(synth.make_seg_pairs(rng, 4, 8, 8, 3)):
        write_grid(calib / f"img{i}_probs.grid", pair.grid)
        write_grid(calib / f"img{i}_labels.grid", pair.truth)
    return calib


@pytest.fixture
def det_calib_dir(tmp_path):
    rng = np.random.default_rng(62)
    calib = tmp_path / "detcal"
    calib.mkdir()
    for i, (preds, gts) in enumerate(synth.make_det_scenario(rng, 20, 10)):
        (calib / f"img{i}_pred.json").write_text(json.dumps(preds.to_json()))
        (calib / f"img{i}_gt.json").write_text(json.dumps(gts.to_json()))
    return calib


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, run_cli):
        code, _, err = run_cli("frobnicate")
        assert code == 1
        assert "Usage" in err or "usage" in err

    def test_missing_required_flag(self, run_cli):
        code, _, err = run_cli("seg", "fit")
        assert code == 1

    def test_help_exits_zero(self, run_cli):
        code, out, err = run_cli("--help")
        assert code == 0
        assert "seg" in out + err

    def test_data_error_exits_two(self, run_cli, tmp_path):
        bad = tmp_path / "bad.grid"
        bad.write_bytes(b"XXXXXXXX" + bytes(16))
        thresh = tmp_path / "t.json"
        thresh.write_text('{"kind":"seg","alpha":0.1,"q":0.5,"n":9}')
        code, _, err = run_cli("seg", "apply", "--threshold", str(thresh),
                               "--grid", str(bad), "--out", str(tmp_path / "o.grid"))
        assert code == 2
        assert json.loads(err.splitlines()[-1])["error"] == "BadMagic"


class TestSegCommands:
    def test_fit_then_apply(self, run_cli, seg_calib_dir, tmp_path):
        thresh = tmp_path / "seg.json"
        code, out, err = run_cli("seg", "fit", "--alpha", "0.1",
                                 "--calib", str(seg_calib_dir), "--out", str(thresh))
        assert code == 0
        doc = json.loads(out)
        assert doc["n"] == 4 * 64
        assert thresh.exists()
        stored = load_threshold(thresh)
        assert stored.n == doc["n"]

        grid_path = next(seg_calib_dir.glob("*_probs.grid"))
        out_path = tmp_path / "labels.grid"
        report_path = tmp_path / "objects.json"
        code, out, _ = run_cli("seg", "apply", "--threshold", str(thresh),
                               "--grid", str(grid_path), "--out", str(out_path),
                               "--report", str(report_path))
        assert code == 0
        labels = read_grid(out_path)
        assert isinstance(labels, LabelGrid)
        report = json.loads(report_path.read_text())
        assert all({"id", "class", "class_name", "boundary"} <= set(o) for o in report["objects"])

    def test_fit_empty_dir_is_data_error(self, run_cli, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run_cli("seg", "fit", "--calib", str(empty), "--out", str(tmp_path / "t.json"))
        assert code == 2


class TestDetCommands:
    def test_fit_then_apply(self, run_cli, det_calib_dir, tmp_path):
        thresh = tmp_path / "det.json"
        code, out, _ = run_cli("det", "fit", "--alpha", "0.1", "--tau", "0.5",
                               "--calib", str(det_calib_dir), "--out", str(thresh))
        assert code == 0
        doc = json.loads(out)
        assert doc["counts"][0] == 200

        dets = tmp_path / "preds.json"
        dets.write_text(json.dumps({"boxes": [
            {"id": 0, "class": 1, "confidence": 0.9,
             "x_min": 10.0, "y_min": 10.0, "x_max": 20.0, "y_max": 20.0}
        ]}))
        out_path = tmp_path / "calibrated.json"
        code, out, _ = run_cli("det", "apply", "--threshold", str(thresh),
                               "--detections", str(dets), "--bounds", "500", "500",
                               "--out", str(out_path))
        assert code == 0
        boxes = json.loads(out_path.read_text())["boxes"]
        assert boxes[0]["x_min"] < 10.0 and boxes[0]["x_max"] > 20.0


class TestUqScore:
    def test_two_step_fixture(self, run_cli, tmp_path):
        trace = tmp_path / "trace.jsonl"
        trace.write_text(
            '{"probs": [0.5, 0.3, 0.2], "vocab_size": 3}\n'
            '{"probs": [0.6, 0.35, 0.05], "vocab_size": 3}\n'
        )
        code, out, _ = run_cli("uq", "score", "--p", "0.9", "--trace", str(trace))
        assert code == 0
        doc = json.loads(out)
        assert doc["value"] == 2.5
        assert doc["per_token"] == [3, 2]

    def test_entropy_method(self, run_cli, tmp_path):
        trace = tmp_path / "trace.jsonl"
        trace.write_text('{"probs": [0.25, 0.25, 0.25, 0.25], "vocab_size": 4}\n')
        code, out, _ = run_cli("uq", "score", "--method", "entropy", "--trace", str(trace))
        assert code == 0
        assert json.loads(out)["value"] == pytest.approx(math.log(4), abs=1e-12)


class TestEvalCommands:
    def test_coverage_seg(self, run_cli, tmp_path):
        code, out, err = run_cli("eval", "coverage", "--task", "seg", "--alpha", "0.1",
                                 "--cal", "20", "--test", "20", "--seed", "7",
                                 "--report-dir", str(tmp_path / "rep"))
        assert code == 0
        doc = json.loads(out)
        assert doc["rate"] >= doc["target"] - 0.02
        assert (tmp_path / "rep" / "coverage.png").exists()
        assert (tmp_path / "rep" / "coverage.json").exists()

    def test_coverage_det(self, run_cli, tmp_path):
        code, out, _ = run_cli("eval", "coverage", "--task", "det", "--alpha", "0.1",
                               "--cal", "30", "--test", "30", "--seed", "8")
        assert code == 0
        doc = json.loads(out)
        assert doc["rate"] >= 0.9

    def test_ece_csv_records(self, run_cli, tmp_path):
        records = tmp_path / "records.csv"
        rows = ["confidence,correct"] + ["0.8,true"] * 3 + ["0.8,false"] * 2
        records.write_text("\n".join(rows) + "\n")
        code, out, _ = run_cli("eval", "ece", "--records", str(records), "--bins", "1",
                               "--report-dir", str(tmp_path / "rep"))
        assert code == 0
        doc = json.loads(out)
        assert doc["ece"] == pytest.approx(0.2, abs=1e-12)
        csv_lines = (tmp_path / "rep" / "reliability.csv").read_text().splitlines()
        assert csv_lines[0] == "confidence_mid,accuracy,count"
        assert (tmp_path / "rep" / "reliability.png").exists()


class TestSweepCommand:
    def test_alpha_sweep(self, run_cli, tmp_path):
        code, out, err = run_cli("sweep", "--axis", "alpha", "--values", "0.1,0.2",
                                 "--task", "seg-coverage", "--seed", "9",
                                 "--cal", "10", "--test", "10",
                                 "--report-dir", str(tmp_path / "rep"))
        assert code == 0
        doc = json.loads(out)
        assert [r["alpha"] for r in doc["rows"]] == [0.1, 0.2]
        assert "alpha" in err  # text table on stderr
        for name in ("sweep.json", "sweep.txt", "sweep.csv", "sweep.png"):
            assert (tmp_path / "rep" / name).exists()

    def test_bad_values_is_usage_error(self, run_cli):
        code, _, _ = run_cli("sweep", "--axis", "alpha", "--values", "a,b", "--task", "seg-coverage")
        assert code == 1


class TestPipelineCommand:
    def test_end_to_end(self, run_cli, tmp_path):
        from conformalkit.container import save_threshold
        from conformalkit.cp import ConformalThreshold, RiskLevel
        from conformalkit.detection import DetThreshold

        write_pnm(tmp_path / "img.pgm", np.zeros((16, 16), dtype=np.uint8))
        save_threshold(tmp_path / "seg_t.json", ConformalThreshold(0.6, RiskLevel(0.1), 99))
        save_threshold(tmp_path / "det_t.json",
                       DetThreshold((1.0, 1.0, 1.0, 1.0), RiskLevel(0.1), (9,) * 4, 0.5))
        manifest = {
            "seed": 5,
            "p": 0.9,
            "uq_method": "top_p",
            "alpha": {"segmentation": 0.1, "detection": 0.1},
            "pathways": [
                {"id": "seg", "kind": "segmentation",
                 "tool_command": [sys.executable, "-m", "conformalkit.adapters", "seg-oracle", "--seed", "11"],
                 "reasoning_command": [sys.executable, "-m", "conformalkit.adapters", "reason-oracle", "--seed", "3"],
                 "threshold": "seg_t.json"},
                {"id": "det", "kind": "detection",
                 "tool_command": [sys.executable, "-m", "conformalkit.adapters", "det-oracle", "--seed", "12"],
                 "reasoning_command": [sys.executable, "-m", "conformalkit.adapters", "reason-oracle", "--seed", "3"],
                 "threshold": "det_t.json"},
            ],
        }
        (tmp_path / "run.json").write_text(json.dumps(manifest))
        code, out, err = run_cli("pipeline", "run", "--config", str(tmp_path / "run.json"),
                                 "--image", str(tmp_path / "img.pgm"),
                                 "--question", "what is here?",
                                 "--out-dir", str(tmp_path / "out"))
        assert code == 0
        doc = json.loads(out)
        assert doc["pathway"] in ("seg", "det")
        trace = json.loads((tmp_path / "out" / "trace.json").read_text())
        assert trace["selected"] == doc["pathway"]
        assert len(trace["pathways"]) == 2
