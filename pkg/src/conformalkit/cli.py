"""Command-line surface.

Every subcommand prints one JSON document to stdout (diagnostics go to
stderr) so downstream harnesses can parse results unconditionally. Exit
codes: 0 success, 1 usage error, 2 data/adapter error. ``--report-dir``
additionally writes delimited data (CSV), an aligned text table, and a
rendered PNG figure for the report-shaped commands.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import figures
from .container import (
    RunManifest,
    load_threshold,
    read_grid,
    save_threshold,
    write_grid,
)
from .detection import Box, DetectionList, conformalize_detections, fit_det, match_boxes
from .errors import ConformalKitError, ManifestError
from .evaluation import coverage_det, coverage_seg, ece, mean_set_size, sweep
from .pipeline import PathwayConfig, run_pipeline
from .segmentation import (
    LabelGrid,
    ProbabilityGrid,
    SegCalibrationPair,
    calibrate_label_grid,
    fit_seg,
    label_objects,
)
from .sequence import load_trace_jsonl, score_sequence
from . import synth


def _emit(doc: dict) -> None:
    click.echo(json.dumps(doc))


def _info(message: str) -> None:
    click.echo(message, err=True)


def _manifest(config) -> RunManifest | None:
    if config is None:
        return None
    return RunManifest.load(config)


config_option = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), default=None,
    help="Run manifest supplying defaults (alpha, tau, p, seed, method).",
)


@click.group()
def cli():
    """Conformal calibration, sequence uncertainty, and the tool pipeline."""


# ----------------------------------------------------------------- seg


@cli.group()
def seg():
    """Pixel-wise segmentation calibration."""


def _load_seg_pairs(calib_dir: Path) -> list[SegCalibrationPair]:
    pairs = []
    for probs_path in sorted(calib_dir.glob("*_probs.grid")):
        labels_path = probs_path.with_name(probs_path.name.replace("_probs.grid", "_labels.grid"))
        if not labels_path.exists():
            raise ManifestError(f"no label grid next to {probs_path.name}")
        grid = read_grid(probs_path)
        truth = read_grid(labels_path)
        if not isinstance(grid, ProbabilityGrid) or not isinstance(truth, LabelGrid):
            raise ManifestError(f"{probs_path.stem}: expected probability + label containers")
        pairs.append(SegCalibrationPair(grid, truth))
    if not pairs:
        raise ManifestError(f"no *_probs.grid / *_labels.grid pairs under {calib_dir}")
    return pairs


@seg.command("fit")
@click.option("--alpha", type=float, default=None, help="Miscoverage level (default 0.1).")
@click.option("--calib", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@config_option
def seg_fit(alpha, calib, out, config):
    """Fit the pooled pixel threshold from paired container files."""
    manifest = _manifest(config)
    if alpha is None:
        alpha = manifest.alpha_seg if manifest else 0.1
    pairs = _load_seg_pairs(Path(calib))
    threshold = fit_seg(pairs, alpha)
    save_threshold(out, threshold)
    _info(f"fitted on {threshold.n} pixels from {len(pairs)} grids")
    _emit({"kind": "seg", "alpha": alpha, "q": threshold.value if threshold.is_finite else "inf",
           "n": threshold.n, "out": str(out)})


@seg.command("apply")
@click.option("--threshold", "threshold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the object report (id, class name, boundary) JSON.")
@config_option
def seg_apply(threshold_path, grid_path, out, report_path, config):
    """Calibrate one probability grid into a label grid."""
    manifest = _manifest(config)
    threshold = load_threshold(threshold_path)
    grid = read_grid(grid_path)
    if not isinstance(grid, ProbabilityGrid):
        raise ManifestError(f"{grid_path} does not hold a probability grid")
    labels = calibrate_label_grid(grid, threshold)
    write_grid(out, labels)
    doc = {"out": str(out), "height": labels.height, "width": labels.width,
           "foreground_pixels": int((labels.labels > 0).sum())}
    if report_path is not None:
        names = manifest.class_names if manifest else None
        objects, _ = label_objects(labels, names)
        Path(report_path).write_text(
            json.dumps({"objects": [o.to_json() for o in objects]}) + "\n"
        )
        doc["report"] = str(report_path)
        doc["objects"] = len(objects)
    _emit(doc)


# ----------------------------------------------------------------- det


@cli.group()
def det():
    """Bounding-box detection calibration."""


def _load_det_pairs(calib_dir: Path) -> list[tuple]:
    images = []
    for pred_path in sorted(calib_dir.glob("*_pred.json")):
        gt_path = pred_path.with_name(pred_path.name.replace("_pred.json", "_gt.json"))
        if not gt_path.exists():
            raise ManifestError(f"no ground-truth file next to {pred_path.name}")
        preds = DetectionList.from_json(json.loads(pred_path.read_text()))
        gts = DetectionList.from_json(json.loads(gt_path.read_text()))
        images.append((preds, gts))
    if not images:
        raise ManifestError(f"no *_pred.json / *_gt.json pairs under {calib_dir}")
    return images


@det.command("fit")
@click.option("--alpha", type=float, default=None, help="Overall miscoverage (default 0.1).")
@click.option("--tau", type=float, default=None, help="IoU matching threshold (default 0.5).")
@click.option("--calib", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@config_option
def det_fit(alpha, tau, calib, out, config):
    """Fit per-side box quantiles from paired detection-list files."""
    manifest = _manifest(config)
    if alpha is None:
        alpha = manifest.alpha_det if manifest else 0.1
    if tau is None:
        tau = manifest.tau if manifest else 0.5
    images = _load_det_pairs(Path(calib))
    threshold = fit_det(images, alpha, tau)
    save_threshold(out, threshold)
    _info(f"fitted on {threshold.counts[0]} matched pairs from {len(images)} images")
    _emit({"kind": "det", "alpha": alpha, "tau": tau,
           "q": [("inf" if math.isinf(v) else v) for v in threshold.q],
           "counts": list(threshold.counts), "out": str(out)})


@det.command("apply")
@click.option("--threshold", "threshold_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--detections", "det_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bounds", nargs=2, type=float, default=None, help="Image extent W H for clipping.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@config_option
def det_apply(threshold_path, det_path, bounds, out, config):
    """Expand every predicted box by the fitted quantiles."""
    threshold = load_threshold(threshold_path)
    detections = DetectionList.from_json(json.loads(Path(det_path).read_text()))
    box_bounds = Box(0.0, 0.0, bounds[0], bounds[1]) if bounds else None
    calibrated = conformalize_detections(detections, threshold, box_bounds)
    Path(out).write_text(json.dumps(calibrated.to_json()) + "\n")
    _emit({"out": str(out), "boxes": len(calibrated)})


# ----------------------------------------------------------------- uq


@cli.group()
def uq():
    """Sequence uncertainty scoring."""


@uq.command("score")
@click.option("--trace", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL trace: one token distribution per line.")
@click.option("--p", type=float, default=None, help="Nucleus level (default 0.9).")
@click.option("--method", type=click.Choice(["top_p", "entropy"]), default=None)
@config_option
def uq_score(trace, p, method, config):
    """Score one answer trace."""
    manifest = _manifest(config)
    if p is None:
        p = manifest.p if manifest else 0.9
    if method is None:
        method = manifest.uq_method if manifest else "top_p"
    seq = load_trace_jsonl(trace)
    us = score_sequence(seq, method, p)
    doc = {"method": method, "value": us.value, "per_token": list(us.per_token), "steps": len(seq)}
    if method == "top_p":
        doc["p"] = p
        doc["truncated_steps"] = list(us.truncated_steps)
    _emit(doc)


# ----------------------------------------------------------------- pipeline


@cli.group("pipeline")
def pipeline_group():
    """Two-stage tool-calibrated reasoning."""


@pipeline_group.command("run")
@click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--question", required=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--parallel/--sequential", default=False)
def pipeline_run(config, image, question, out_dir, parallel):
    """Run every configured pathway and select the lowest-uncertainty answer."""
    manifest = RunManifest.load(config)
    pathways = PathwayConfig.from_manifest(manifest)
    result = run_pipeline(
        image, question, pathways, out_dir,
        uq_method=manifest.uq_method, p=manifest.p, parallel=parallel,
    )
    dropped = [t["pathway_id"] for t in result.trace["pathways"] if t["status"] == "failed"]
    if dropped:
        _info(f"dropped pathways: {', '.join(dropped)}")
    _emit({
        "answer": result.answer.answer_text,
        "pathway": result.answer.pathway_id,
        "us": result.answer.us.value,
        "method": result.answer.us.method,
        "trace": str(result.trace_path),
    })


# ----------------------------------------------------------------- eval


@cli.group("eval")
def eval_group():
    """Empirical verification: coverage and calibration error."""


def _report_dir(path) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


@eval_group.command("coverage")
@click.option("--task", type=click.Choice(["seg", "det"]), required=True)
@click.option("--alpha", type=float, default=None)
@click.option("--cal", type=int, default=100, help="Calibration grids/images.")
@click.option("--test", type=int, default=100, help="Test grids/images.")
@click.option("--seed", type=int, default=None)
@click.option("--report-dir", type=click.Path(file_okay=False), default=None)
@config_option
def eval_coverage(task, alpha, cal, test, seed, report_dir, config):
    """Measure empirical coverage on a seeded synthetic scenario."""
    manifest = _manifest(config)
    if seed is None:
        seed = manifest.seed if manifest else 0
    rng = np.random.default_rng(seed)
    if task == "seg":
        if alpha is None:
            alpha = manifest.alpha_seg if manifest else 0.1
        cal_pairs = synth.make_seg_pairs(rng, cal)
        test_pairs = synth.make_seg_pairs(rng, test)
        threshold = fit_seg(cal_pairs, alpha)
        report = coverage_seg(threshold, test_pairs)
        doc = report.to_json()
        doc.update({"task": "seg", "alpha": alpha, "seed": seed,
                    "threshold": threshold.value if threshold.is_finite else "inf",
                    "mean_set_size": mean_set_size((p.grid for p in test_pairs), threshold)})
    else:
        if alpha is None:
            alpha = manifest.alpha_det if manifest else 0.1
        tau = manifest.tau if manifest else 0.5
        cal_images = synth.make_det_scenario(rng, cal)
        test_images = synth.make_det_scenario(rng, test)
        threshold = fit_det(cal_images, alpha, tau)
        pairs = []
        for preds, gts in test_images:
            pairs.extend(match_boxes(preds, gts, tau).pairs)
        report = coverage_det(threshold, pairs)
        doc = report.to_json()
        doc.update({"task": "det", "alpha": alpha, "tau": tau, "seed": seed,
                    "q": list(threshold.q)})
    out = _report_dir(report_dir)
    if out is not None:
        (out / "coverage.json").write_text(json.dumps(doc, indent=2) + "\n")
        figures.coverage_figure(report, out / "coverage.png", label=task)
        doc["report_dir"] = str(out)
    _info(f"coverage {report.rate:.4f} against target {report.target:.4f}")
    _emit(doc)


def _load_records(path: Path) -> list[tuple]:
    records = []
    if path.suffix == ".csv":
        with path.open() as handle:
            for row in csv.DictReader(handle):
                records.append((float(row["confidence"]), row["correct"].strip().lower() in ("1", "true", "yes")))
    else:
        for line in path.read_text().splitlines():
            if line.strip():
                doc = json.loads(line)
                records.append((float(doc["confidence"]), bool(doc["correct"])))
    return records


@eval_group.command("ece")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV (confidence,correct) or JSONL records.")
@click.option("--bins", type=int, default=10)
@click.option("--report-dir", type=click.Path(file_okay=False), default=None)
@config_option
def eval_ece(records_path, bins, report_dir, config):
    """Expected calibration error with reliability-diagram data."""
    records = _load_records(Path(records_path))
    report = ece(records, bins)
    doc = report.to_json()
    doc["records"] = len(records)
    out = _report_dir(report_dir)
    if out is not None:
        (out / "ece.json").write_text(json.dumps(doc, indent=2) + "\n")
        with (out / "reliability.csv").open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["confidence_mid", "accuracy", "count"])
            writer.writerows(report.reliability_rows())
        figures.reliability_diagram(report, out / "reliability.png")
        doc["report_dir"] = str(out)
    _info(f"ece {report.ece:.6f} over {len(records)} records in {bins} bins")
    _emit(doc)


# ----------------------------------------------------------------- sweep


@cli.command("sweep")
@click.option("--axis", type=click.Choice(["alpha", "p"]), required=True)
@click.option("--values", required=True, help="Comma-separated parameter values.")
@click.option("--task", type=click.Choice(["seg-coverage", "det-coverage", "top-p"]), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--cal", type=int, default=50)
@click.option("--test", type=int, default=50)
@click.option("--report-dir", type=click.Path(file_okay=False), default=None)
@config_option
def sweep_command(axis, values, task, seed, cal, test, report_dir, config):
    """Refit and rescore a synthetic scenario across a parameter grid."""
    manifest = _manifest(config)
    if seed is None:
        seed = manifest.seed if manifest else 0
    try:
        grid = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise click.UsageError(f"--values must be comma-separated numbers: {exc}")
    table = sweep(axis, grid, task, seed=seed, options={"cal": cal, "test": test})
    _info(table.text_table().rstrip("\n"))
    doc = table.to_json()
    doc["seed"] = seed
    out = _report_dir(report_dir)
    if out is not None:
        (out / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n")
        (out / "sweep.txt").write_text(table.text_table())
        headers = table.headers()
        with (out / "sweep.csv").open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(headers)
            for row in table.rows:
                writer.writerow([row.get(h) if not isinstance(row.get(h), list) else json.dumps(row.get(h)) for h in headers])
        figures.sweep_figure(table, out / "sweep.png")
        doc["report_dir"] = str(out)
    _emit(doc)


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return 1
    except ConformalKitError as exc:
        click.echo(json.dumps({"error": exc.code, "message": str(exc)}), err=True)
        return 2
    except OSError as exc:
        click.echo(json.dumps({"error": "IoFailure", "message": str(exc)}), err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
