"""Asymmetric dual-stream detector.

A frozen patch-embedding transformer encoder provides reference features;
a trainable twin encoder plus a deep convolutional decoder reconstructs
them from defect inputs. Channel-wise L2 normalization reduces feature
comparison to direction, and a segmentation head turns per-level
discrepancies into a pixel-level probability map.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

NORMALIZE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Feature pyramid
# ---------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Ordered multi-level feature tensors, each ``(B, C_l, H_l, W_l)``."""

    levels: list[torch.Tensor] = field(repr=False)
    normalized: bool = False

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        for lvl in self.levels:
            if lvl.ndim != 4:
                raise ValueError(f"levels must be (B, C, H, W), got {tuple(lvl.shape)}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(lvl.shape) for lvl in self.levels]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([lvl.detach() for lvl in self.levels], self.normalized)


def normalize_channels(pyramid: FeaturePyramid) -> FeaturePyramid:
    """Scale every spatial position's channel vector to unit L2 norm.

    Vectors with norm below the epsilon guard stay (numerically) zero.

    Raises:
        ValueError: if the pyramid is already normalized.
    """
    if pyramid.normalized:
        raise ValueError("pyramid is already channel-normalized")
    levels = []
    for lvl in pyramid.levels:
        norm = torch.linalg.vector_norm(lvl, dim=1, keepdim=True).clamp_min(NORMALIZE_EPS)
        levels.append(lvl / norm)
    return FeaturePyramid(levels, normalized=True)


def check_unit_normalized(x: torch.Tensor, name: str, tol: float = 1e-3) -> None:
    """Raise if any channel vector of ``x`` is neither unit-norm nor zero."""
    if x.ndim not in (3, 4):
        raise ValueError(f"{name} must be (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    dim = 0 if x.ndim == 3 else 1
    with torch.no_grad():
        norms = torch.linalg.vector_norm(x.detach(), dim=dim)
        bad = ((norms - 1.0).abs() > tol) & (norms > 1e-6)
        if bool(bad.any()):
            raise ValueError(
                f"{name} is not channel-normalized (worst norm {float(norms[bad][0]):.4f}); "
                "apply normalize_channels first"
            )


# ---------------------------------------------------------------------------
# Transformer encoder
# ---------------------------------------------------------------------------


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(attn.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    """Small dense ViT-style encoder exposing features at chosen depths."""

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        embed_dim: int,
        depth: int,
        num_heads: int,
        in_channels: int = 3,
    ) -> None:
        super().__init__()
        if image_size % patch_size != 0:
            raise ConfigError(f"image_size {image_size} not divisible by patch {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.embed_dim = embed_dim
        self.patch_embed = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.empty(1, self.grid * self.grid, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(_Block(embed_dim, num_heads) for _ in range(depth))

    def _to_map(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        return tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)

    def features(
        self, x: torch.Tensor, taps: Sequence[int]
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run the encoder, returning tapped feature maps and final tokens."""
        if x.ndim != 4 or x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected (B, C, {self.image_size}, {self.image_size}) input, got {tuple(x.shape)}"
            )
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        maps: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in taps:
                maps.append(self._to_map(tokens))
        if len(maps) != len(taps):
            raise ConfigError(f"taps {tuple(taps)} out of range for depth {len(self.blocks)}")
        return maps, tokens


class StudentDecoder(nn.Module):
    """Deep convolutional decoder emitting one feature map per tap level."""

    def __init__(
        self,
        embed_dim: int,
        grid: int,
        num_levels: int,
        channels: int = 96,
        depth: int = 3,
    ) -> None:
        super().__init__()
        self.grid = grid
        layers: list[nn.Module] = []
        in_ch = embed_dim
        for _ in range(depth):
            layers += [
                nn.Conv2d(in_ch, channels, 3, padding=1),
                nn.GroupNorm(math.gcd(8, channels), channels),
                nn.SiLU(),
            ]
            in_ch = channels
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleList(
            nn.Conv2d(channels, embed_dim, 3, padding=1) for _ in range(num_levels)
        )

    def forward(self, tokens: torch.Tensor, target_hw: Sequence[tuple[int, int]]) -> list[torch.Tensor]:
        b, n, d = tokens.shape
        h = self.trunk(tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid))
        out = []
        for head, hw in zip(self.heads, target_hw):
            level = head(h)
            if level.shape[-2:] != tuple(hw):
                level = F.interpolate(level, size=tuple(hw), mode="bilinear", align_corners=False)
            out.append(level)
        return out


class SegmentationHead(nn.Module):
    """Convolutional head squashing fused discrepancy evidence to [0, 1].

    The final convolution is zero-initialized, so with all-zero evidence the
    output is exactly 0.5 everywhere.
    """

    def __init__(self, in_channels: int, hidden: int = 32) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.GroupNorm(math.gcd(8, hidden), hidden),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GroupNorm(math.gcd(8, hidden), hidden),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(self.net(fused)))


def build_difference_evidence(
    teacher: FeaturePyramid, student: FeaturePyramid
) -> list[torch.Tensor]:
    """Per level: concat the (1 - cosine) map with the feature difference.

    Both pyramids must be channel-normalized and aligned.
    """
    if not (teacher.normalized and student.normalized):
        raise ValueError("evidence requires channel-normalized pyramids")
    if teacher.shapes != student.shapes:
        raise ValueError(f"pyramids misaligned: {teacher.shapes} vs {student.shapes}")
    evidence = []
    for t, s in zip(teacher.levels, student.levels):
        cos = (t * s).sum(dim=1, keepdim=True)
        evidence.append(torch.cat([1.0 - cos, t - s], dim=1))
    return evidence


def segment(
    seg_head: SegmentationHead,
    evidence: Sequence[torch.Tensor],
    out_size: tuple[int, int],
) -> torch.Tensor:
    """Fuse multi-level evidence at image resolution into a probability map.

    Each level is bilinearly upsampled to ``out_size``, channel-concatenated,
    and passed through the head; output is ``(B, H, W)`` in [0, 1].
    """
    upsampled = [
        F.interpolate(e, size=out_size, mode="bilinear", align_corners=False) for e in evidence
    ]
    return seg_head(torch.cat(upsampled, dim=1)).squeeze(1)


# ---------------------------------------------------------------------------
# Detector model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture of the dual-stream detector."""

    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 48
    depth: int = 3
    num_heads: int = 4
    level_taps: tuple[int, ...] = (0, 1, 2)
    decoder_channels: int = 96
    decoder_depth: int = 3
    seg_hidden: int = 32
    use_decoder: bool = True
    use_seg_head: bool = True
    teacher_seed: int = 1234
    student_seed: int = 5678

    def __post_init__(self) -> None:
        if not self.level_taps:
            raise ConfigError("level_taps must not be empty")
        if any(t < 0 or t >= self.depth for t in self.level_taps):
            raise ConfigError(f"level_taps {self.level_taps} out of range for depth {self.depth}")


def _seeded(seed: int, factory):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return factory()


class DetectorModel(nn.Module):
    """Frozen teacher encoder + trainable student encoder/decoder + head."""

    def __init__(self, cfg: DetectorConfig, teacher_weights: str | Path | None = None) -> None:
        super().__init__()
        self.cfg = cfg

        def encoder() -> PatchEncoder:
            return PatchEncoder(
                cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads
            )

        self.teacher = _seeded(cfg.teacher_seed, encoder)
        if teacher_weights:
            state = torch.load(Path(teacher_weights), map_location="cpu", weights_only=True)
            self.teacher.load_state_dict(state)
        self.teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)

        self.student = _seeded(cfg.student_seed, encoder)
        self.decoder = (
            _seeded(
                cfg.student_seed + 1,
                lambda: StudentDecoder(
                    cfg.embed_dim,
                    self.student.grid,
                    len(cfg.level_taps),
                    cfg.decoder_channels,
                    cfg.decoder_depth,
                ),
            )
            if cfg.use_decoder
            else None
        )
        self.seg_head = (
            _seeded(
                cfg.student_seed + 2,
                lambda: SegmentationHead(
                    len(cfg.level_taps) * (cfg.embed_dim + 1), cfg.seg_hidden
                ),
            )
            if cfg.use_seg_head
            else None
        )

    def train(self, mode: bool = True) -> "DetectorModel":
        super().train(mode)
        self.teacher.eval()  # the teacher never leaves inference mode
        return self

    def teacher_features(self, images: torch.Tensor) -> FeaturePyramid:
        """Deterministic frozen-encoder features at the tap depths."""
        with torch.no_grad():
            maps, _ = self.teacher.features(images, self.cfg.level_taps)
        return FeaturePyramid(maps)

    def student_features(self, images: torch.Tensor) -> FeaturePyramid:
        """Student pyramid; decoded from the bottleneck when enabled."""
        maps, tokens = self.student.features(images, self.cfg.level_taps)
        if self.decoder is not None:
            target_hw = [m.shape[-2:] for m in maps]
            maps = self.decoder(tokens, target_hw)
        if __debug__:
            expected = [
                (images.shape[0], self.cfg.embed_dim, self.student.grid, self.student.grid)
            ] * len(self.cfg.level_taps)
            actual = [tuple(m.shape) for m in maps]
            assert actual == expected, f"student pyramid misaligned: {actual} vs {expected}"
        return FeaturePyramid(maps)

    def trainable_parameters(self):
        yield from self.student.parameters()
        if self.decoder is not None:
            yield from self.decoder.parameters()
        if self.seg_head is not None:
            yield from self.seg_head.parameters()


def teacher_fingerprint(model: DetectorModel | nn.Module) -> str:
    """SHA-256 over the (sorted) teacher parameter bytes."""
    module = model.teacher if isinstance(model, DetectorModel) else model
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_detector(path: str | Path, model: DetectorModel) -> None:
    """Persist the detector plus the frozen-teacher fingerprint."""
    payload = {
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "teacher_hash": teacher_fingerprint(model),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_detector(path: str | Path) -> DetectorModel:
    """Load a detector checkpoint and verify the teacher fingerprint.

    Raises:
        DataError: if the file is missing or the stored teacher hash does
            not match the restored parameters.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"detector checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg_dict = dict(payload["config"])
    cfg_dict["level_taps"] = tuple(cfg_dict["level_taps"])
    model = DetectorModel(DetectorConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    actual = teacher_fingerprint(model)
    if actual != payload["teacher_hash"]:
        raise DataError(
            f"teacher fingerprint mismatch in {path}: stored {payload['teacher_hash'][:12]}..., "
            f"restored {actual[:12]}..."
        )
    return model
