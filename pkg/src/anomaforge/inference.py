"""Test-time pipeline: layer anomaly maps, pixel scores, Top-K image score.

At inference both streams consume the same image. Per-level discrepancy maps
are one minus the channel dot product of the normalized features; the
segmentation head turns fused discrepancies into the pixel score map (no
min-max renormalization), and the image score is the mean of the K highest
pixel scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import to_tensor
from .network import (
    DetectorModel,
    build_difference_evidence,
    check_unit_normalized,
    normalize_channels,
    segment,
)


@dataclass(frozen=True)
class AnomalyResult:
    """Scores for one image: pixel map, per-level maps, and Top-K score."""

    pixel_map: np.ndarray = field(repr=False)
    layer_maps: list[np.ndarray] = field(repr=False)
    image_score: float
    k_used: int


def layer_anomaly_map(teacher_level: torch.Tensor, student_level: torch.Tensor) -> torch.Tensor:
    """Per-position discrepancy map: one minus the channel dot product.

    Inputs must be channel-normalized, shaped ``(C, H, W)`` or
    ``(B, C, H, W)``; values lie in [0, 2] and vanish where the features
    agree in direction.

    Raises:
        ValueError: on shape mismatch or unnormalized input.
    """
    if teacher_level.shape != student_level.shape:
        raise ValueError(
            f"shape mismatch: {tuple(teacher_level.shape)} vs {tuple(student_level.shape)}"
        )
    check_unit_normalized(teacher_level, "teacher features")
    check_unit_normalized(student_level, "student features")
    dim = 0 if teacher_level.ndim == 3 else 1
    return 1.0 - (teacher_level * student_level).sum(dim=dim)


def image_score(pixel_map: np.ndarray, k: int) -> float:
    """Mean of the ``k`` largest pixel scores (``k`` clamped to the size).

    Raises:
        ValueError: for an empty map or ``k < 1``.
    """
    flat = np.asarray(pixel_map, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("pixel map is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(k, flat.size)
    top = np.partition(flat, flat.size - k)[flat.size - k :]
    top = np.sort(top)[::-1]
    return float(np.mean(top))


def effective_top_k(base_k: int, base_side: int, height: int, width: int) -> int:
    """Scale the Top-K count proportionally to the pixel count.

    ``base_k`` is defined at a ``base_side`` x ``base_side`` working
    resolution; smaller maps use proportionally fewer pixels (at least 1).
    """
    if base_k < 1 or base_side < 1:
        raise ValueError("base_k and base_side must be >= 1")
    scaled = int(round(base_k * (height * width) / float(base_side * base_side)))
    return max(1, scaled)


def _prepare_batch(model: DetectorModel, image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        if image.ndim != 3:
            raise ValueError(f"expected (H, W, C) array, got shape {image.shape}")
        tensor = to_tensor(image)
    else:
        tensor = image
    if tensor.ndim == 3:
        tensor = tensor[None]
    size = model.cfg.image_size
    if tensor.shape[-2:] != (size, size):
        raise ValueError(f"expected {size}x{size} input, got {tuple(tensor.shape[-2:])}")
    return tensor


def score_pixels_batch(model: DetectorModel, images: torch.Tensor) -> torch.Tensor:
    """Pixel score maps for a batch; ``(B, H, W)`` values in [0, 1]."""
    if model.seg_head is None:
        raise ValueError("model has no segmentation head; pixel scores undefined")
    model.eval()
    with torch.no_grad():
        teacher_pyr = normalize_channels(model.teacher_features(images))
        student_pyr = normalize_channels(model.student_features(images))
        evidence = build_difference_evidence(teacher_pyr, student_pyr)
        return segment(model.seg_head, evidence, images.shape[-2:])


def score_pixels(model: DetectorModel, image: np.ndarray | torch.Tensor) -> np.ndarray:
    """Pixel-level anomaly scores for one image.

    Runs both streams on the image, normalizes, fuses discrepancies through
    the segmentation head, and returns the ``(H, W)`` map in [0, 1] as-is.
    """
    batch = _prepare_batch(model, image)
    return score_pixels_batch(model, batch)[0].cpu().numpy()


def detect(
    model: DetectorModel,
    image: np.ndarray | torch.Tensor,
    *,
    top_k: int = 100,
    top_k_reference: int = 256,
) -> AnomalyResult:
    """Full per-image inference: pixel map, layer maps, and image score.

    Layer maps are exported bilinearly upsampled to image resolution for
    inspection; pixel scores come from the segmentation head.
    """
    batch = _prepare_batch(model, image)
    model.eval()
    with torch.no_grad():
        teacher_pyr = normalize_channels(model.teacher_features(batch))
        student_pyr = normalize_channels(model.student_features(batch))
        layer_maps = []
        for t_lvl, s_lvl in zip(teacher_pyr.levels, student_pyr.levels):
            amap = layer_anomaly_map(t_lvl, s_lvl)[:, None]
            amap = F.interpolate(amap, size=batch.shape[-2:], mode="bilinear", align_corners=False)
            layer_maps.append(amap[0, 0].cpu().numpy())
        if model.seg_head is None:
            raise ValueError("model has no segmentation head; pixel scores undefined")
        evidence = build_difference_evidence(teacher_pyr, student_pyr)
        pixel_map = segment(model.seg_head, evidence, batch.shape[-2:])[0].cpu().numpy()
    height, width = pixel_map.shape
    k = effective_top_k(top_k, top_k_reference, height, width)
    score = image_score(pixel_map, k)
    return AnomalyResult(
        pixel_map=pixel_map.astype(np.float32),
        layer_maps=layer_maps,
        image_score=score,
        k_used=min(k, pixel_map.size),
    )
