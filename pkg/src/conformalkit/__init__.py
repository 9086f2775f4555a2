"""Conformal calibration for segmentation and detection outputs, top-p
sequence uncertainty, and an uncertainty-guided tool pipeline.

Submodule imports are lazy so that lightweight entry points (the synthetic
adapters in particular) start without paying for numpy.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "RiskLevel": "cp",
    "ScoreSet": "cp",
    "ConformalThreshold": "cp",
    "conformal_quantile": "cp",
    "ProbabilityGrid": "segmentation",
    "LabelGrid": "segmentation",
    "SegCalibrationPair": "segmentation",
    "collect_pixel_scores": "segmentation",
    "fit_seg": "segmentation",
    "pixel_prediction_set": "segmentation",
    "calibrate_label_grid": "segmentation",
    "label_objects": "segmentation",
    "Box": "detection",
    "DetectionList": "detection",
    "DetThreshold": "detection",
    "iou": "detection",
    "match_boxes": "detection",
    "box_scores": "detection",
    "fit_det": "detection",
    "conformalize_box": "detection",
    "conformalize_detections": "detection",
    "TokenDistribution": "sequence",
    "TokenDistributionSequence": "sequence",
    "NucleusLevel": "sequence",
    "UncertaintyScore": "sequence",
    "top_p_set_size": "sequence",
    "uncertainty_top_p": "sequence",
    "uncertainty_entropy": "sequence",
    "score_sequence": "sequence",
    "load_trace_jsonl": "sequence",
    "coverage_seg": "evaluation",
    "coverage_det": "evaluation",
    "normalize_confidence": "evaluation",
    "ece": "evaluation",
    "sweep": "evaluation",
    "read_grid": "container",
    "write_grid": "container",
    "save_threshold": "container",
    "load_threshold": "container",
    "RunManifest": "container",
    "PathwayConfig": "pipeline",
    "run_pipeline": "pipeline",
    "select_answer": "pipeline",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    import importlib

    module = importlib.import_module(f".{module_name}", __name__)
    return getattr(module, name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
