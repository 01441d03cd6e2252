"""Flat key-value run configuration.

A run is described by a single flat TOML file (no sections). Every key has
a default, unknown keys are rejected, and ``--set key=value`` overrides are
applied after the file is read. ``to_toml`` re-serializes a config in a
canonical form so that load -> serialize -> load is the identity.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError

WORKDIR_ENV_VAR = "ANOMAFORGE_WORKDIR"


@dataclass(frozen=True)
class RunConfig:
    """All knobs for one category run, flat for easy file/CLI handling."""

    # General
    category: str = "demo"
    data_root: str = "data"
    work_dir: str = ""
    seed: int = 0
    image_size: int = 64
    device: str = "cpu"

    # Diffusion schedule and perturbed generation
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_anom: int = 400
    sigma_extra: float = 0.05
    sample_steps: int = 40

    # Denoiser architecture and training
    ddpm_base_channels: int = 32
    ddpm_channel_mults: tuple[int, ...] = (1, 2)
    ddpm_train_steps: int = 400
    ddpm_batch_size: int = 16
    ddpm_lr: float = 2e-4

    # Defect synthesis
    n_per_image: int = 1
    perlin_grid_scale: int = 16
    perlin_octaves: int = 2
    perlin_persistence: float = 0.7
    mask_threshold_quantile: float = 0.85
    mask_max_area: float = 0.5
    delta_min: float = 0.3
    delta_max: float = 1.0
    morph_op: str = "none"
    morph_kernel: int = 3
    synth_batch_size: int = 16

    # Detector architecture
    embed_dim: int = 48
    patch_size: int = 4
    vit_depth: int = 3
    vit_heads: int = 4
    level_taps: tuple[int, ...] = (0, 1, 2)
    decoder_channels: int = 96
    decoder_depth: int = 3
    seg_hidden: int = 32
    teacher_seed: int = 1234
    teacher_weights: str = ""

    # Detector training
    det_train_steps: int = 700
    det_batch_size: int = 8
    det_lr: float = 2e-3
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
    checkpoint_every: int = 0

    # Evaluation
    fpr_limit: float = 0.3
    top_k: int = 100
    top_k_reference: int = 256

    def validate(self) -> None:
        """Raise :class:`ConfigError` on out-of-range or inconsistent values."""
        if self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                f"require 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})"
            )
        if not (1 <= self.t_anom <= self.T):
            raise ConfigError(f"t_anom must be in [1, T={self.T}], got {self.t_anom}")
        if self.sigma_extra < 0:
            raise ConfigError(f"sigma_extra must be >= 0, got {self.sigma_extra}")
        if self.sample_steps < 0:
            raise ConfigError(f"sample_steps must be >= 0 (0 = full chain), got {self.sample_steps}")
        if self.perlin_grid_scale < 2:
            raise ConfigError(f"perlin_grid_scale must be >= 2, got {self.perlin_grid_scale}")
        if self.perlin_octaves < 1:
            raise ConfigError(f"perlin_octaves must be >= 1, got {self.perlin_octaves}")
        if not (0.0 < self.perlin_persistence <= 1.0):
            raise ConfigError(f"perlin_persistence must be in (0, 1], got {self.perlin_persistence}")
        if not (0.0 < self.mask_threshold_quantile < 1.0):
            raise ConfigError(
                f"mask_threshold_quantile must be in (0, 1), got {self.mask_threshold_quantile}"
            )
        if not (0.0 < self.mask_max_area <= 1.0):
            raise ConfigError(f"mask_max_area must be in (0, 1], got {self.mask_max_area}")
        if not (0.0 <= self.delta_min <= self.delta_max <= 1.0):
            raise ConfigError(
                f"require 0 <= delta_min <= delta_max <= 1, got ({self.delta_min}, {self.delta_max})"
            )
        if self.morph_op not in ("none", "erode", "dilate", "open", "close"):
            raise ConfigError(f"unknown morph_op {self.morph_op!r}")
        if self.morph_kernel < 1 or self.morph_kernel % 2 == 0:
            raise ConfigError(f"morph_kernel must be odd and >= 1, got {self.morph_kernel}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.vit_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be divisible by vit_heads {self.vit_heads}"
            )
        if not self.level_taps:
            raise ConfigError("level_taps must not be empty")
        if any(t < 0 or t >= self.vit_depth for t in self.level_taps):
            raise ConfigError(
                f"level_taps {self.level_taps} out of range for vit_depth {self.vit_depth}"
            )
        if not (self.use_cosine or (self.use_seg_head and (self.use_focal or self.use_l1))):
            raise ConfigError("configuration disables every loss term")
        if not (0.0 < self.fpr_limit <= 1.0):
            raise ConfigError(f"fpr_limit must be in (0, 1], got {self.fpr_limit}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.top_k_reference < 1:
            raise ConfigError(f"top_k_reference must be >= 1, got {self.top_k_reference}")

    def resolve_work_dir(self) -> Path:
        """Return the working directory, falling back to the environment."""
        if self.work_dir:
            return Path(self.work_dir)
        env = os.environ.get(WORKDIR_ENV_VAR, "")
        if env:
            return Path(env)
        raise ConfigError(
            f"work_dir is not set and the {WORKDIR_ENV_VAR} environment variable is empty"
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: object) -> object:
    """Coerce a parsed TOML value to the declared field type."""
    field = _FIELDS[name]
    kind = field.type
    if kind == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be a boolean, got {value!r}")
    if kind == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind == "str":
        if isinstance(value, str):
            return value
        raise ConfigError(f"{name} must be a string, got {value!r}")
    if kind.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be an array of integers, got {value!r}")
        out = []
        for item in value:
            if isinstance(item, bool) or not isinstance(item, int):
                raise ConfigError(f"{name} must contain only integers, got {item!r}")
            out.append(item)
        return tuple(out)
    raise AssertionError(f"unhandled field type {kind} for {name}")


def _from_mapping(mapping: dict[str, object]) -> RunConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {name: _coerce(name, value) for name, value in mapping.items()}
    return RunConfig(**kwargs)


def _parse_toml(text: str) -> dict[str, object]:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config syntax: {exc}") from exc
    flat: dict[str, object] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat key-value; found table {key!r}")
        flat[key] = value
    return flat


def apply_overrides(cfg: RunConfig, overrides: list[str] | None) -> RunConfig:
    """Apply ``key=value`` override strings on top of an existing config."""
    if not overrides:
        return cfg
    updates: dict[str, object] = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key in override: {key!r}")
        raw = raw.strip()
        if _FIELDS[key].type == "str":
            # Paths and names may be given unquoted on the command line.
            if len(raw) >= 2 and raw[0] == raw[-1] == '"':
                raw = raw[1:-1]
            updates[key] = raw
        else:
            parsed = _parse_toml(f"value = {raw}")
            updates[key] = parsed["value"]
    merged = {**dataclasses.asdict(cfg), **updates}
    return _from_mapping({k: merged[k] for k in merged})


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Load, override, and validate a run configuration file.

    Args:
        path: TOML file of flat ``key = value`` pairs.
        overrides: optional ``key=value`` strings applied after the file.

    Returns:
        A validated :class:`RunConfig`.

    Raises:
        ConfigError: on unreadable files, unknown keys, bad types or ranges.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = _from_mapping(_parse_toml(path.read_text()))
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(str(v) for v in value) + "]"
    raise AssertionError(f"unserializable config value {value!r}")


def to_toml(cfg: RunConfig) -> str:
    """Serialize a config canonically (declaration order, one key per line)."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(to_toml(cfg))
