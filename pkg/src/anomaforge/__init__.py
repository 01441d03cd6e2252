"""Closed-loop surface defect pipeline.

Synthesizes realistic local defects from normal images only (a diffusion
model plus gradient-noise masks) and localizes defects with an asymmetric
frozen-teacher / reconstructing-student network, a segmentation head, and
Top-K score aggregation, evaluated with image/pixel AUROC and a
region-balanced overlap area.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .config import RunConfig, load_config, save_config, to_toml
from .data import (
    CorpusEntry,
    CorpusIndex,
    DefectTriplet,
    TripletStore,
    build_triplets,
    scan_mvtec_layout,
)
from .diffusion import (
    DenoiserNet,
    PerturbConfig,
    VarianceSchedule,
    ddpm_train_step,
    forward_sample,
    generate_global_anomaly,
    make_schedule,
    reverse_step,
    subsample_schedule,
)
from .errors import ConfigError, DataError, NumericError, PipelineError
from .inference import AnomalyResult, detect, effective_top_k, image_score, layer_anomaly_map, score_pixels
from .metrics import EvalReport, aupro, auroc, pixel_auroc
from .network import (
    DetectorConfig,
    DetectorModel,
    FeaturePyramid,
    load_detector,
    normalize_channels,
    save_detector,
    segment,
    teacher_fingerprint,
)
from .synthesis import (
    DefectMask,
    PerlinConfig,
    binarize,
    blend_defect,
    morph_refine,
    perlin_field,
    sample_defect_mask,
)
from .training import LossConfig, cosine_loss, focal_loss, joint_train_step, seg_loss, train_detector

__all__ = [
    "__version__",
    "AnomalyResult",
    "ConfigError",
    "CorpusEntry",
    "CorpusIndex",
    "DataError",
    "DefectMask",
    "DefectTriplet",
    "DenoiserNet",
    "DetectorConfig",
    "DetectorModel",
    "EvalReport",
    "FeaturePyramid",
    "LossConfig",
    "NumericError",
    "PerlinConfig",
    "PerturbConfig",
    "PipelineError",
    "RunConfig",
    "TripletStore",
    "VarianceSchedule",
    "aupro",
    "auroc",
    "binarize",
    "blend_defect",
    "build_triplets",
    "cosine_loss",
    "ddpm_train_step",
    "detect",
    "effective_top_k",
    "focal_loss",
    "forward_sample",
    "generate_global_anomaly",
    "image_score",
    "joint_train_step",
    "layer_anomaly_map",
    "load_config",
    "load_detector",
    "make_schedule",
    "morph_refine",
    "normalize_channels",
    "perlin_field",
    "pixel_auroc",
    "reverse_step",
    "sample_defect_mask",
    "save_config",
    "save_detector",
    "scan_mvtec_layout",
    "score_pixels",
    "seg_loss",
    "segment",
    "subsample_schedule",
    "teacher_fingerprint",
    "to_toml",
    "train_detector",
]
