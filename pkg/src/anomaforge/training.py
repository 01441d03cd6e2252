"""Multi-task joint optimization of the dual-stream detector.

The teacher consumes the clean image while the student consumes the defect
image; a per-level cosine reconstruction loss pulls decoded student features
toward the teacher's clean-image features, and the segmentation head is
supervised with focal plus L1 terms against the binary defect mask. Every
term can be toggled off for ablations.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import TripletStore, to_tensor
from .errors import ConfigError, NumericError
from .network import (
    DetectorModel,
    build_difference_evidence,
    check_unit_normalized,
    normalize_channels,
    segment,
    save_detector,
    teacher_fingerprint,
)

logger = logging.getLogger(__name__)

FOCAL_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Weights, focal parameters, and ablation toggles."""

    lambda_cos: float = 1.0
    lambda_focal: float = 1.0
    lambda_l1: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    use_decoder: bool = True
    use_cosine: bool = True
    use_seg_head: bool = True
    use_focal: bool = True
    use_l1: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda_cos", "lambda_focal", "lambda_l1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not (0.0 < self.focal_alpha < 1.0):
            raise ConfigError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if not (self.use_cosine or (self.use_seg_head and (self.use_focal or self.use_l1))):
            raise ConfigError("at least one loss term must be enabled")


def cosine_loss(teacher_level: torch.Tensor, student_level: torch.Tensor) -> torch.Tensor:
    """Mean over positions of one minus the channel dot product.

    Both tensors must already be channel-normalized (``(C, H, W)`` or
    ``(B, C, H, W)``); the result lies in [0, 2].

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
    return (1.0 - (teacher_level * student_level).sum(dim=dim)).mean()


def focal_loss(
    pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25
) -> torch.Tensor:
    """Binary focal loss on probabilities, averaged over all pixels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    p_t = pred * target + (1.0 - pred) * (1.0 - target)
    alpha_t = alpha * target + (1.0 - alpha) * (1.0 - target)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t.clamp_min(FOCAL_EPS))).mean()


def seg_loss(pred: torch.Tensor, mask: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Weighted focal + L1 segmentation supervision, honoring the toggles."""
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs mask {tuple(mask.shape)}")
    mask = mask.to(pred.dtype)
    total = pred.new_zeros(())
    if cfg.use_focal:
        total = total + cfg.lambda_focal * focal_loss(pred, mask, cfg.focal_gamma, cfg.focal_alpha)
    if cfg.use_l1:
        total = total + cfg.lambda_l1 * (pred - mask).abs().mean()
    return total


def joint_train_step(
    model: DetectorModel,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    cfg: LossConfig,
    optimizer: torch.optim.Optimizer,
) -> dict[str, float]:
    """One multi-task update on a triplet batch.

    The teacher encodes the clean images, the student encodes the defect
    images, and only student-side parameters are updated.

    Args:
        model: assembled detector.
        batch: ``(clean, defect, mask)`` tensors shaped ``(B, 3, H, W)``,
            ``(B, 3, H, W)``, and ``(B, H, W)``.
        cfg: loss weights and toggles.
        optimizer: optimizer over the model's trainable parameters.

    Returns:
        Per-term loss values keyed by name; always contains ``total`` and
        only the terms enabled by the toggles.

    Raises:
        NumericError: if any term is non-finite.
    """
    clean, defect, mask = batch
    optimizer.zero_grad(set_to_none=True)
    teacher_pyr = normalize_channels(model.teacher_features(clean))
    student_pyr = normalize_channels(model.student_features(defect))

    breakdown: dict[str, float] = {}
    total = defect.new_zeros(())
    if cfg.use_cosine:
        cos_total = defect.new_zeros(())
        for idx, (t_lvl, s_lvl) in enumerate(zip(teacher_pyr.levels, student_pyr.levels)):
            term = cosine_loss(t_lvl, s_lvl)
            breakdown[f"cosine_l{idx}"] = float(term.detach())
            cos_total = cos_total + term
        breakdown["cosine"] = float(cos_total.detach())
        total = total + cfg.lambda_cos * cos_total
    if cfg.use_seg_head:
        if model.seg_head is None:
            raise ConfigError("loss config enables the segmentation head but the model has none")
        evidence = build_difference_evidence(teacher_pyr, student_pyr)
        pred = segment(model.seg_head, evidence, mask.shape[-2:])
        if cfg.use_focal:
            term = cfg.lambda_focal * focal_loss(
                pred, mask.to(pred.dtype), cfg.focal_gamma, cfg.focal_alpha
            )
            breakdown["focal"] = float(term.detach())
            total = total + term
        if cfg.use_l1:
            term = cfg.lambda_l1 * (pred - mask.to(pred.dtype)).abs().mean()
            breakdown["l1"] = float(term.detach())
            total = total + term

    value = float(total.detach())
    breakdown["total"] = value
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise NumericError(f"non-finite loss terms: {breakdown}")
    total.backward()
    optimizer.step()
    return breakdown


def make_optimizer(model: DetectorModel, lr: float) -> torch.optim.Optimizer:
    """Adam over the student-side parameters only."""
    return torch.optim.Adam(model.trainable_parameters(), lr=lr)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` to zero across the run."""
    if total_steps <= 1:
        return base_lr
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def _batches(store: TripletStore, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield shuffled triplet index batches, reshuffling every epoch."""
    order: list[int] = []
    for _ in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(len(store)).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def load_triplet_batch(
    store: TripletStore, indices: list[int], device: str = "cpu"
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Assemble ``(clean, defect, mask)`` tensors for the given indices."""
    triplets = [store.load_triplet(i) for i in indices]
    clean = torch.stack([to_tensor(t.normal) for t in triplets]).to(device)
    defect = torch.stack([to_tensor(t.defect) for t in triplets]).to(device)
    mask = torch.stack([torch.from_numpy(t.mask.mask.astype(np.float32)) for t in triplets]).to(device)
    return clean, defect, mask


def train_detector(
    model: DetectorModel,
    store: TripletStore,
    cfg: LossConfig,
    *,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    checkpoint_every: int = 0,
    device: str = "cpu",
    log_every: int = 50,
) -> list[dict[str, float]]:
    """Run the joint training loop over a persisted triplet store.

    Uses Adam with half-cosine learning-rate decay, writes one CSV row per
    step (columns match the enabled loss terms), and verifies at the end
    that the frozen teacher's parameters are bit-identical to the start.
    """
    if len(store) < 1:
        raise ConfigError("triplet store is empty")
    model = model.to(device).train()
    optimizer = make_optimizer(model, lr)
    rng = np.random.default_rng(seed)
    hash_before = teacher_fingerprint(model)
    history: list[dict[str, float]] = []
    rows: list[list[str]] = []
    columns: list[str] | None = None
    for step, indices in enumerate(_batches(store, batch_size, steps, rng), start=1):
        current_lr = cosine_lr(step - 1, steps, lr)
        for group in optimizer.param_groups:
            group["lr"] = current_lr
        batch = load_triplet_batch(store, indices, device)
        breakdown = joint_train_step(model, batch, cfg, optimizer)
        history.append(breakdown)
        if columns is None:
            columns = ["step", "lr"] + sorted(breakdown)
        rows.append([str(step), f"{current_lr:.8f}"] + [f"{breakdown[c]:.6f}" for c in columns[2:]])
        if step % log_every == 0 or step == steps:
            logger.info("detector step %d/%d total %.4f", step, steps, breakdown["total"])
        if checkpoint_path is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
            save_detector(checkpoint_path, model)
    if teacher_fingerprint(model) != hash_before:
        raise RuntimeError("frozen teacher parameters changed during training")
    if log_path is not None and columns is not None:
        with Path(log_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            writer.writerows(rows)
    if checkpoint_path is not None:
        save_detector(checkpoint_path, model)
    model.eval()
    return history
