"""Score-map persistence and heatmap overlay rendering."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def write_score_png16(path: str | Path, score_map: np.ndarray) -> None:
    """Persist a [0, 1] score map as a 16-bit grayscale PNG (score x 65535)."""
    arr = np.clip(np.rint(np.asarray(score_map, dtype=np.float64) * 65535.0), 0, 65535)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(path)


def read_score_png16(path: str | Path) -> np.ndarray:
    """Load a 16-bit score PNG back to float32 in [0, 1]."""
    with Image.open(Path(path)) as img:
        return np.asarray(img, dtype=np.float32) / 65535.0


def overlay_heatmap(
    image: np.ndarray, score_map: np.ndarray, alpha: float = 0.5, cmap: str = "jet"
) -> np.ndarray:
    """Alpha-blend a colormapped score map onto an RGB image (uint8 out)."""
    colors = plt.get_cmap(cmap)(np.clip(score_map, 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * np.asarray(image, dtype=np.float64) + alpha * colors
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def render_panel(
    image: np.ndarray,
    gt_mask: np.ndarray | None,
    score_map: np.ndarray,
    out_path: str | Path,
    title: str = "",
) -> None:
    """Write a three-pane figure: input, ground-truth mask, score overlay."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(np.clip(image, 0.0, 1.0))
    axes[0].set_title("input")
    if gt_mask is not None:
        axes[1].imshow(gt_mask, cmap="gray", vmin=0, vmax=1)
        axes[1].set_title("ground truth")
    else:
        axes[1].imshow(np.zeros_like(score_map), cmap="gray", vmin=0, vmax=1)
        axes[1].set_title("ground truth (none)")
    axes[2].imshow(overlay_heatmap(image, score_map))
    axes[2].set_title("score overlay")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
