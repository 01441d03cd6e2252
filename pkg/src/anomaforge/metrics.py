"""Evaluation suite: image AUROC, pixel AUROC, and per-region overlap area.

The ranking metrics are computed exactly from rank statistics with ties
counted half. The region metric labels 8-connected ground-truth components,
sweeps thresholds over the observed scores, averages per-region recall so
small defects weigh equally, and integrates against the false-positive rate
up to a configurable limit.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank statistic, ties counted half.

    Args:
        scores: real-valued anomaly scores.
        labels: binary labels (1 = anomalous); both classes must appear.

    Raises:
        ValueError: on length mismatch or single-class labels.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: both classes must be present")
    ranks = rankdata(scores)  # average ranks on ties
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """AUROC over the pooled pixels of all test images.

    Raises:
        ValueError: on per-image shape mismatch or single-class pixels.
    """
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps vs {len(masks)} masks")
    flat_scores = []
    flat_labels = []
    for i, (score_map, mask) in enumerate(zip(maps, masks)):
        score_map = np.asarray(score_map)
        mask = np.asarray(mask)
        if score_map.shape != mask.shape:
            raise ValueError(f"image {i}: map {score_map.shape} vs mask {mask.shape}")
        flat_scores.append(score_map.ravel())
        flat_labels.append((mask > 0).astype(np.int64).ravel())
    return auroc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 8-connected foreground components of a binary mask."""
    labeled, count = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return labeled, int(count)


def region_overlap_series(
    score_map: np.ndarray, mask: np.ndarray, thresholds: np.ndarray
) -> np.ndarray:
    """Per-region recall at each threshold, shape ``(n_regions, n_thresholds)``.

    A pixel counts as predicted anomalous when its score is >= the threshold;
    each row is independent of every other region by construction.
    """
    labeled, count = label_regions(mask)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    series = np.empty((count, thresholds.size), dtype=np.float64)
    for region in range(1, count + 1):
        values = np.sort(np.asarray(score_map, dtype=np.float64)[labeled == region])
        hits = values.size - np.searchsorted(values, thresholds, side="left")
        series[region - 1] = hits / values.size
    return series


def _pro_curve(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    max_thresholds: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Mean per-region overlap and FPR per threshold, plus the region count.

    Returns arrays ordered by increasing FPR, anchored at (0, 0).
    """
    all_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    thresholds = np.unique(all_scores)
    if thresholds.size > max_thresholds:
        quantiles = np.linspace(0.0, 1.0, max_thresholds)
        thresholds = np.unique(np.quantile(all_scores, quantiles))
    thresholds = thresholds[::-1]  # descending: FPR grows along the sweep

    overlap_rows = []
    normal_chunks = []
    for score_map, mask in zip(maps, masks):
        score_map = np.asarray(score_map, dtype=np.float64)
        mask = np.asarray(mask)
        if score_map.shape != mask.shape:
            raise ValueError(f"map {score_map.shape} vs mask {mask.shape}")
        _, count = label_regions(mask)
        if count:
            overlap_rows.append(region_overlap_series(score_map, mask, thresholds))
        normal_chunks.append(score_map[mask == 0].ravel())

    if not overlap_rows:
        raise ValueError("no defect regions in the ground-truth masks")
    normal_scores = np.sort(np.concatenate(normal_chunks))
    if normal_scores.size == 0:
        raise ValueError("no normal pixels; FPR undefined")

    overlaps = np.vstack(overlap_rows)
    pro = overlaps.mean(axis=0)
    fp = normal_scores.size - np.searchsorted(normal_scores, thresholds, side="left")
    fpr = fp / normal_scores.size

    fpr = np.concatenate(([0.0], fpr))
    pro = np.concatenate(([0.0], pro))
    return fpr, pro, overlaps.shape[0]


def aupro(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    *,
    max_thresholds: int = 512,
) -> float:
    """Area under the per-region-overlap curve, normalized by the FPR limit.

    The threshold sweep uses every distinct score on small inputs and
    quantile-spaced thresholds on large ones; the curve is integrated by
    trapezoid up to ``fpr_limit`` (with linear interpolation at the cut)
    and divided by the limit, yielding a value in [0, 1].

    Args:
        maps: per-image score maps.
        masks: matching binary ground-truth masks; at least one defect
            region must exist overall.
        fpr_limit: integration limit in (0, 1].
        max_thresholds: sweep size cap for large inputs.

    Raises:
        ValueError: on bad limits, missing regions, or shape mismatches.
    """
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, pro, _ = _pro_curve(maps, masks, max_thresholds)
    area = _integrate_to_limit(fpr, pro, fpr_limit)
    return area / fpr_limit


def _integrate_to_limit(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    """Trapezoid integral of pro(fpr) over [0, limit]."""
    keep = fpr <= limit
    xs = fpr[keep]
    ys = pro[keep]
    if xs.size == 0 or xs[-1] < limit:
        # Interpolate the curve value exactly at the limit.
        idx = int(np.searchsorted(fpr, limit, side="right"))
        if idx >= fpr.size:
            cut_y = ys[-1] if ys.size else 0.0
        else:
            x0, y0 = (fpr[idx - 1], pro[idx - 1]) if idx > 0 else (0.0, 0.0)
            x1, y1 = fpr[idx], pro[idx]
            cut_y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs = np.concatenate((xs, [limit]))
        ys = np.concatenate((ys, [cut_y]))
    return float(np.trapezoid(ys, xs))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Aggregate and per-category metric values for one evaluation run."""

    i_auroc: float
    p_auroc: float
    aupro: float
    fpr_limit: float
    n_images: int
    n_pixels: int
    n_regions: int
    per_category: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("i_auroc", "p_auroc", "aupro"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: str | Path) -> None:
        columns = ["category", "i_auroc", "p_auroc", "aupro", "n_images"]
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for category, row in sorted(self.per_category.items()):
                writer.writerow(
                    [category]
                    + [f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in columns[1:]]
                )
            writer.writerow(
                ["average", f"{self.i_auroc:.6f}", f"{self.p_auroc:.6f}", f"{self.aupro:.6f}", self.n_images]
            )


def compute_report(
    image_scores: Sequence[float],
    image_labels: Sequence[int],
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    *,
    category: str,
    fpr_limit: float = 0.3,
) -> EvalReport:
    """Assemble the three metrics for one category's test set."""
    i_val = auroc(image_scores, image_labels)
    p_val = pixel_auroc(maps, masks)
    _, _, n_regions = _pro_curve(maps, masks, 512)
    pro_val = aupro(maps, masks, fpr_limit)
    n_pixels = int(sum(np.asarray(m).size for m in maps))
    row = {
        "i_auroc": i_val,
        "p_auroc": p_val,
        "aupro": pro_val,
        "n_images": len(image_scores),
    }
    return EvalReport(
        i_auroc=i_val,
        p_auroc=p_val,
        aupro=pro_val,
        fpr_limit=fpr_limit,
        n_images=len(image_scores),
        n_pixels=n_pixels,
        n_regions=n_regions,
        per_category={category: row},
    )
