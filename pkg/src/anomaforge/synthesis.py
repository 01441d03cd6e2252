"""Local defect synthesis: Perlin masks and opacity blending.

Binary defect masks are carved out of multi-octave gradient-lattice noise
and blended with a generated global anomaly image at a per-sample opacity.
Outside the mask the output is bit-identical to the normal image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError

NORM_FACTOR = float(np.sqrt(2.0))  # scales single-octave noise to [-1, 1]

MORPH_OPS = ("erode", "dilate", "open", "close")


@dataclass(frozen=True)
class PerlinConfig:
    """Parameters of the fractal noise field used for defect masks."""

    grid_scale: int = 16
    octaves: int = 2
    persistence: float = 0.7
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_scale < 2:
            raise ConfigError(f"grid_scale must be >= 2 pixels, got {self.grid_scale}")
        if self.octaves < 1:
            raise ConfigError(f"octaves must be >= 1, got {self.octaves}")
        if not (0.0 < self.persistence <= 1.0):
            raise ConfigError(f"persistence must be in (0, 1], got {self.persistence}")


@dataclass(frozen=True)
class DefectMask:
    """Binary mask with entries in {0, 1}."""

    mask: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # type: ignore[return-value]


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lerp(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    return a + w * (b - a)


def _octave_field(height: int, width: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Single gradient-lattice octave with unit gradients, range [-1, 1]."""
    ny = int(np.ceil(height / cell)) + 1
    nx = int(np.ceil(width / cell)) + 1
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(ny, nx))
    gy, gx = np.sin(angles), np.cos(angles)

    y = np.arange(height, dtype=np.float64) / cell
    x = np.arange(width, dtype=np.float64) / cell
    i0 = np.minimum(y.astype(int), ny - 2)
    j0 = np.minimum(x.astype(int), nx - 2)
    fy = (y - i0)[:, None]
    fx = (x - j0)[None, :]

    def corner_dot(di: int, dj: int) -> np.ndarray:
        gyy = gy[np.ix_(i0 + di, j0 + dj)]
        gxx = gx[np.ix_(i0 + di, j0 + dj)]
        return gyy * (fy - di) + gxx * (fx - dj)

    uy = _fade(fy)
    ux = _fade(fx)
    top = _lerp(corner_dot(0, 0), corner_dot(0, 1), ux)
    bottom = _lerp(corner_dot(1, 0), corner_dot(1, 1), ux)
    return NORM_FACTOR * _lerp(top, bottom, uy)


def perlin_field(height: int, width: int, cfg: PerlinConfig) -> np.ndarray:
    """Multi-octave fractal gradient noise.

    Octave ``o`` halves the lattice cell size and scales its contribution by
    ``persistence**o``; the sum is renormalized so values stay in [-1, 1].
    Deterministic given ``cfg.seed``; the base octave is exactly zero at its
    lattice points.

    Raises:
        ValueError: if either dimension is smaller than ``grid_scale``.
    """
    if height < cfg.grid_scale or width < cfg.grid_scale:
        raise ValueError(
            f"dims ({height}, {width}) must be >= grid_scale {cfg.grid_scale}"
        )
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.octaves)
    total = np.zeros((height, width), dtype=np.float64)
    weight = 0.0
    for octave, stream in enumerate(streams):
        cell = cfg.grid_scale // (2**octave)
        if cell < 2:
            break
        amp = cfg.persistence**octave
        total += amp * _octave_field(height, width, cell, np.random.default_rng(stream))
        weight += amp
    return total / weight


def binarize(fld: np.ndarray, threshold: float) -> DefectMask:
    """Threshold a real field into a binary mask (1 where strictly above)."""
    fld = np.asarray(fld)
    return DefectMask((fld > threshold).astype(np.uint8))


def morph_refine(mask: DefectMask, op: str, kernel: int) -> DefectMask:
    """Binary morphology with a square structuring element.

    Pixels outside the image are treated as zeros, so erosion shrinks
    foreground touching the border.

    Args:
        mask: input binary mask.
        op: one of ``erode``, ``dilate``, ``open``, ``close``.
        kernel: odd side length of the square structuring element.

    Raises:
        ValueError: for an even or non-positive kernel, or an unknown op.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if op not in MORPH_OPS:
        raise ValueError(f"op must be one of {MORPH_OPS}, got {op!r}")
    structure = np.ones((kernel, kernel), dtype=bool)
    data = mask.mask.astype(bool)
    if op == "erode":
        out = ndimage.binary_erosion(data, structure=structure, border_value=0)
    elif op == "dilate":
        out = ndimage.binary_dilation(data, structure=structure, border_value=0)
    elif op == "open":
        out = ndimage.binary_opening(data, structure=structure)
    else:
        out = ndimage.binary_closing(data, structure=structure)
    return DefectMask(out.astype(np.uint8))


def blend_defect(
    normal: np.ndarray,
    anomaly: np.ndarray,
    mask: DefectMask | np.ndarray,
    delta: float,
) -> np.ndarray:
    """Blend an anomaly image into a normal image under a binary mask.

    Outside the mask the result equals ``normal`` exactly; inside, each
    pixel is the opacity mix ``(1 - delta) * normal + delta * anomaly``.

    Args:
        normal: image in [0, 1], shape ``(H, W)`` or ``(H, W, C)``.
        anomaly: image of identical shape.
        mask: binary mask of spatial shape ``(H, W)``.
        delta: opacity in [0, 1].

    Raises:
        ValueError: on shape mismatch or delta outside [0, 1].
    """
    normal = np.asarray(normal, dtype=np.float64)
    anomaly = np.asarray(anomaly, dtype=np.float64)
    m2d = mask.mask if isinstance(mask, DefectMask) else DefectMask(np.asarray(mask)).mask
    if normal.shape != anomaly.shape:
        raise ValueError(f"shape mismatch: normal {normal.shape} vs anomaly {anomaly.shape}")
    if normal.shape[:2] != m2d.shape:
        raise ValueError(f"mask shape {m2d.shape} does not match image {normal.shape[:2]}")
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    m = m2d.astype(np.float64)
    if normal.ndim == 3:
        m = m[:, :, None]
    return (1.0 - m) * normal + (1.0 - delta) * (m * normal) + delta * (m * anomaly)


def sample_defect_mask(
    height: int,
    width: int,
    rng: np.random.Generator,
    *,
    grid_scale: int = 16,
    octaves: int = 2,
    persistence: float = 0.7,
    threshold_quantile: float = 0.85,
    max_area: float = 0.5,
    morph_op: str = "none",
    morph_kernel: int = 3,
    max_tries: int = 32,
) -> tuple[DefectMask, dict]:
    """Draw a mask whose area fraction lies in ``(0, max_area]``.

    The binarization threshold is the per-sample ``threshold_quantile`` of
    the noise field, which keeps the covered area controllable; samples with
    empty or oversized masks are redrawn.

    Returns:
        ``(mask, meta)`` where meta records the accepted field seed and
        threshold.

    Raises:
        RuntimeError: if no acceptable mask is found in ``max_tries`` draws.
    """
    for _ in range(max_tries):
        seed = int(rng.integers(0, 2**63 - 1))
        cfg = PerlinConfig(
            grid_scale=grid_scale,
            octaves=octaves,
            persistence=persistence,
            seed=seed,
        )
        fld = perlin_field(height, width, cfg)
        threshold = float(np.quantile(fld, threshold_quantile))
        mask = binarize(fld, threshold)
        if morph_op != "none":
            mask = morph_refine(mask, morph_op, morph_kernel)
        area = mask.area_fraction
        if 0.0 < area <= max_area:
            return mask, {"perlin_seed": seed, "threshold": threshold, "area_fraction": area}
    raise RuntimeError(
        f"no mask with area in (0, {max_area}] found after {max_tries} draws"
    )
