"""Denoising diffusion model trained on normal images only.

Provides the variance schedule, closed-form forward noising, a small U-Net
noise predictor, the stochastic reverse chain, and perturbed generation of
global anomaly images used as raw material for defect synthesis.

Timesteps are 1-indexed throughout: ``t`` runs from 1 (least noisy) to ``T``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Variance schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances and their derived cumulative products.

    ``betas[t-1]`` is the variance added at step ``t``; ``alpha_bars[t-1]``
    is the cumulative signal-retention product up to and including ``t``.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self) -> None:
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ConfigError("schedule requires at least one step")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])


def make_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Build a linear variance schedule.

    Args:
        T: number of steps, >= 1.
        beta_start: variance at step 1.
        beta_end: variance at step T.

    Returns:
        Schedule with ``betas`` linearly spaced from ``beta_start`` to
        ``beta_end`` inclusive and ``alpha_bars`` as the running product.

    Raises:
        ConfigError: if ``T < 1`` or the betas do not satisfy
            ``0 < beta_start <= beta_end < 1``.
    """
    if not isinstance(T, int) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return VarianceSchedule(betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def subsample_schedule(sched: VarianceSchedule, num_steps: int) -> tuple[VarianceSchedule, np.ndarray]:
    """Derive a shorter schedule visiting a subset of the original steps.

    The sub-schedule keeps the original marginals: its ``alpha_bars`` are the
    originals at the kept steps, and each beta is the effective variance of
    the corresponding jump. Used to run the reverse chain in fewer steps.

    Args:
        sched: full schedule.
        num_steps: number of steps to keep (clamped to ``sched.T``).

    Returns:
        ``(sub_schedule, kept)`` where ``kept[k-1]`` is the original 1-indexed
        timestep that sub-step ``k`` corresponds to.
    """
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    num_steps = min(num_steps, sched.T)
    kept = np.unique(np.round(np.linspace(1, sched.T, num_steps)).astype(int))
    bars = sched.alpha_bars[kept - 1]
    prev = np.concatenate(([1.0], bars[:-1]))
    betas = 1.0 - bars / prev
    sub = VarianceSchedule(betas, 1.0 - betas, bars, float(betas[0]), float(betas[-1]))
    return sub, kept


def forward_sample(x0, t: int, eps, sched: VarianceSchedule):
    """Sample the closed-form forward marginal at step ``t``.

    Computes ``sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``. Works
    for scalars, numpy arrays, and torch tensors alike.

    Raises:
        ValueError: if ``t`` is out of range or shapes disagree.
    """
    a_bar = sched.alpha_bar(t)
    x0_shape = getattr(x0, "shape", None)
    eps_shape = getattr(eps, "shape", None)
    if x0_shape is not None and eps_shape is not None and x0_shape != eps_shape:
        raise ValueError(f"eps shape {eps_shape} does not match x0 shape {x0_shape}")
    return math.sqrt(a_bar) * x0 + math.sqrt(1.0 - a_bar) * eps


# ---------------------------------------------------------------------------
# Noise-prediction U-Net
# ---------------------------------------------------------------------------


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos embedding of the (1-indexed) timestep."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"time embedding dim must be even, got {dim}")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
        )
        angles = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int) -> None:
        super().__init__()
        groups = math.gcd(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Small U-Net predicting the injected noise from ``(x_t, t)``.

    The final convolution is zero-initialized so a fresh network predicts
    zero noise everywhere; output shape always equals input shape.
    """

    def __init__(
        self,
        image_channels: int = 3,
        base_channels: int = 32,
        channel_mults: Sequence[int] = (1, 2),
    ) -> None:
        super().__init__()
        self.image_channels = image_channels
        self.base_channels = base_channels
        self.channel_mults = tuple(channel_mults)
        time_dim = base_channels * 4
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(base_channels),
            nn.Linear(base_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        chans = [base_channels * m for m in self.channel_mults]
        levels = len(chans)
        self.conv_in = nn.Conv2d(image_channels, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i, ch in enumerate(chans):
            prev = chans[max(i - 1, 0)]
            self.down_blocks.append(_ResBlock(prev, ch, time_dim))
            if i < levels - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = _ResBlock(chans[-1], chans[-1], time_dim)
        # Up path runs levels deepest-first; block p handles level (levels-1-p).
        self.up_blocks = nn.ModuleList()
        for p in range(levels):
            level = levels - 1 - p
            in_ch = (chans[-1] if level == levels - 1 else chans[level]) + chans[level]
            out_ch = chans[max(level - 1, 0)]
            self.up_blocks.append(_ResBlock(in_ch, out_ch, time_dim))
        self.norm_out = nn.GroupNorm(math.gcd(8, chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], image_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def arch_config(self) -> dict:
        return {
            "image_channels": self.image_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
        }

    def forward(self, x: torch.Tensor, t: torch.Tensor | int) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamplers):
                h = self.downsamplers[i](h)
        h = self.mid(h, temb)
        for p, block in enumerate(self.up_blocks):
            level = len(self.down_blocks) - 1 - p
            skip = skips[level]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def ddpm_loss(
    net: nn.Module,
    batch: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: VarianceSchedule,
) -> torch.Tensor:
    """Noise-prediction mean squared error for given draws of ``t`` and ``eps``."""
    if batch.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} must match batch {tuple(batch.shape)}")
    bars = torch.as_tensor(sched.alpha_bars, dtype=batch.dtype, device=batch.device)[t - 1]
    bars = bars.view(-1, *([1] * (batch.ndim - 1)))
    x_t = torch.sqrt(bars) * batch + torch.sqrt(1.0 - bars) * eps
    pred = net(x_t, t)
    return F.mse_loss(pred, eps)


def ddpm_train_step(
    net: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    sched: VarianceSchedule,
    rng: np.random.Generator,
) -> float:
    """One optimization step: sample ``t`` and ``eps``, regress the noise.

    Args:
        net: noise predictor.
        optimizer: optimizer over ``net`` parameters.
        batch: images, shape ``(B, C, H, W)``, values in [0, 1].
        sched: variance schedule.
        rng: source of the ``t`` and ``eps`` draws.

    Returns:
        The scalar loss value (always >= 0).

    Raises:
        NumericError: if the loss is not finite.
    """
    if batch.ndim != 4 or batch.shape[0] < 1:
        raise ValueError(f"batch must be a nonempty (B, C, H, W) tensor, got {tuple(batch.shape)}")
    t = torch.from_numpy(rng.integers(1, sched.T + 1, size=batch.shape[0])).long()
    eps = torch.from_numpy(
        rng.standard_normal(tuple(batch.shape), dtype=np.float32)
    ).to(batch.device, batch.dtype)
    optimizer.zero_grad(set_to_none=True)
    loss = ddpm_loss(net, batch, t.to(batch.device), eps, sched)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"non-finite denoiser loss {value} at timesteps {t.tolist()}")
    loss.backward()
    optimizer.step()
    return value


def train_denoiser(
    net: nn.Module,
    images: torch.Tensor,
    sched: VarianceSchedule,
    *,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log_path: Path | None = None,
    log_every: int = 50,
) -> list[float]:
    """Train the denoiser on a stack of normal images.

    Batches are drawn with replacement from ``images`` using a dedicated RNG
    so a fixed seed reproduces the run (and the loss log) exactly.
    """
    if images.shape[0] < 1:
        raise ValueError("need at least one training image")
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    losses: list[float] = []
    rows = ["step,loss"]
    net.train()
    for step in range(1, steps + 1):
        idx = rng.integers(0, images.shape[0], size=min(batch_size, images.shape[0]))
        loss = ddpm_train_step(net, optimizer, images[idx], sched, rng)
        losses.append(loss)
        rows.append(f"{step},{loss:.6f}")
        if step % log_every == 0 or step == steps:
            logger.info("denoiser step %d/%d loss %.4f", step, steps, loss)
    if log_path is not None:
        Path(log_path).write_text("\n".join(rows) + "\n")
    return losses


# ---------------------------------------------------------------------------
# Sampling and perturbed generation
# ---------------------------------------------------------------------------


def reverse_mean(net: nn.Module, x_t: torch.Tensor, t: int, sched: VarianceSchedule) -> torch.Tensor:
    """Posterior mean of the reverse transition at step ``t``."""
    sched._check_t(t)
    with torch.no_grad():
        eps_hat = net(x_t, t)
    beta = sched.beta(t)
    a_bar = sched.alpha_bar(t)
    coef = beta / math.sqrt(1.0 - a_bar)
    return (x_t - coef * eps_hat) / math.sqrt(sched.alpha(t))


def reverse_step(
    net: nn.Module,
    x_t: torch.Tensor,
    t: int,
    sched: VarianceSchedule,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Sample the reverse transition with fixed per-step variance.

    Draws ``x_{t-1}`` from a Gaussian centered on the posterior mean with
    variance ``beta_t``; at ``t = 1`` the mean is returned exactly.
    """
    mean = reverse_mean(net, x_t, t, sched)
    if t == 1:
        return mean
    z = torch.from_numpy(rng.standard_normal(tuple(x_t.shape), dtype=np.float32))
    z = z.to(device=x_t.device, dtype=x_t.dtype)
    return mean + math.sqrt(sched.beta(t)) * z


@dataclass(frozen=True)
class PerturbConfig:
    """Controls perturbed generation of global anomaly images.

    ``t_anom`` is the (1-indexed, full-schedule) step where generation
    starts; ``sigma_extra`` is the standard deviation of the constant
    Gaussian perturbation injected into each intermediate state.
    """

    t_anom: int
    sigma_extra: float
    seed: int

    def __post_init__(self) -> None:
        if self.t_anom < 1:
            raise ConfigError(f"t_anom must be >= 1, got {self.t_anom}")
        if self.sigma_extra < 0:
            raise ConfigError(f"sigma_extra must be >= 0, got {self.sigma_extra}")


def generate_anomaly_batch(
    net: nn.Module,
    images: torch.Tensor,
    seeds: Sequence[int],
    t_anom: int,
    sigma_extra: float,
    sched: VarianceSchedule,
    *,
    sample_steps: int | None = None,
) -> torch.Tensor:
    """Noise a batch to ``t_anom`` then denoise with extra perturbation.

    Every sample draws its noise from its own seeded stream, so outputs are
    reproducible per (image, seed) for a fixed batch layout.

    Args:
        net: trained noise predictor.
        images: ``(B, C, H, W)`` tensor in [0, 1].
        seeds: one RNG seed per image.
        t_anom: starting step on the full schedule, in ``[1, sched.T]``.
        sigma_extra: std of the perturbation added to intermediate states.
        sched: full variance schedule.
        sample_steps: if set, run the reverse chain on a subsampled schedule
            of roughly this many steps.

    Returns:
        Generated images clamped to [0, 1], same shape as ``images``.
    """
    if images.ndim != 4:
        raise ValueError(f"images must be (B, C, H, W), got {tuple(images.shape)}")
    if len(seeds) != images.shape[0]:
        raise ValueError(f"got {len(seeds)} seeds for {images.shape[0]} images")
    if not 1 <= t_anom <= sched.T:
        raise ValueError(f"t_anom {t_anom} outside [1, {sched.T}]")
    work = sched
    start = t_anom
    if sample_steps is not None and sample_steps < sched.T:
        work, kept = subsample_schedule(sched, sample_steps)
        # Start from the kept step closest to the requested t_anom.
        start = int(np.argmin(np.abs(kept - t_anom))) + 1
    rngs = [np.random.default_rng(s) for s in seeds]
    shape = tuple(images.shape[1:])

    def draw(std: float = 1.0) -> torch.Tensor:
        stack = np.stack([r.standard_normal(shape, dtype=np.float32) for r in rngs])
        return torch.from_numpy(stack).to(images.device, images.dtype) * std

    was_training = net.training
    net.eval()
    x = forward_sample(images, start, draw(), work)
    for t in range(start, 0, -1):
        x = reverse_mean(net, x, t, work)
        if t > 1:
            x = x + math.sqrt(work.beta(t)) * draw()
            if sigma_extra > 0:
                x = x + draw(sigma_extra)
    if was_training:
        net.train()
    return x.clamp(0.0, 1.0)


def generate_global_anomaly(
    net: nn.Module,
    image: torch.Tensor,
    cfg: PerturbConfig,
    sched: VarianceSchedule,
    *,
    sample_steps: int | None = None,
) -> torch.Tensor:
    """Generate one global anomaly image from a normal image.

    Deterministic given ``cfg.seed``. See :func:`generate_anomaly_batch`.
    """
    single = image.ndim == 3
    batch = image[None] if single else image
    seeds = [cfg.seed + i for i in range(batch.shape[0])]
    out = generate_anomaly_batch(
        net,
        batch,
        seeds,
        cfg.t_anom,
        cfg.sigma_extra,
        sched,
        sample_steps=sample_steps,
    )
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_ddpm_checkpoint(
    path: str | Path,
    net: DenoiserNet,
    sched_params: dict,
    extra: dict | None = None,
) -> None:
    """Write net parameters plus the schedule and generation settings."""
    payload = {
        "state_dict": net.state_dict(),
        "arch": net.arch_config(),
        "schedule": dict(sched_params),
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_ddpm_checkpoint(path: str | Path) -> tuple[DenoiserNet, VarianceSchedule, dict]:
    """Load a denoiser checkpoint; returns (net, schedule, extra settings)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    net = DenoiserNet(**payload["arch"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    sp = payload["schedule"]
    sched = make_schedule(int(sp["T"]), float(sp["beta_start"]), float(sp["beta_end"]))
    return net, sched, dict(payload["extra"])
