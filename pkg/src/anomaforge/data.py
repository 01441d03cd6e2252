"""Triplet dataset construction and MVTec-AD-layout corpus ingestion.

A triplet binds a normal image, its synthesized defect counterpart, and the
binary defect mask under one index. Triplets are persisted as 8-bit PNGs
(masks as {0, 255}) plus a JSON-lines manifest, and always satisfy
``defect == normal`` wherever the mask is zero.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .diffusion import VarianceSchedule, generate_anomaly_batch
from .errors import DataError
from .synthesis import DefectMask, blend_defect, sample_defect_mask

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def load_image(path: str | Path, image_size: int | None = None) -> np.ndarray:
    """Decode an RGB image to float32 in [0, 1], optionally bilinear-resized."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_mask(path: str | Path, image_size: int | None = None) -> np.ndarray:
    """Decode a mask PNG to uint8 {0, 1}; values above 127 count as defect."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.NEAREST)
            return (np.asarray(img) > 127).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def save_image_u8(path: Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as a single-channel {0, 255} PNG."""
    arr = (np.asarray(mask).astype(np.uint8) * 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) float image -> (C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(image, -1, 0))).float()


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor -> (H, W, C) float32 array."""
    return np.moveaxis(tensor.detach().cpu().numpy(), 0, -1).astype(np.float32)


# ---------------------------------------------------------------------------
# Corpus index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    image_path: Path
    label: str  # "normal" | "anomalous"
    mask_path: Path | None = None


@dataclass(frozen=True)
class CorpusIndex:
    """Sorted index of one split of one category."""

    category: str
    split: str  # "train" | "test"
    entries: tuple[CorpusEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CorpusEntry]:
        return iter(self.entries)


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def scan_mvtec_layout(root: str | Path, category: str, split: str) -> CorpusIndex:
    """Index a category directory laid out in the MVTec AD convention.

    ``<root>/<category>/train/good`` holds normal training images;
    ``test/<defect_type>`` holds test images (``good`` means normal); every
    anomalous test image must have a mask under
    ``ground_truth/<defect_type>/<stem>_mask.png`` (or ``<stem>.png``).

    Raises:
        DataError: if directories are missing, the split is unknown, or an
            anomalous image lacks its ground-truth mask.
    """
    root = Path(root)
    category_dir = root / category
    if not category_dir.is_dir():
        raise DataError(f"category directory not found: {category_dir}")
    if split == "train":
        train_dir = category_dir / "train" / "good"
        if not train_dir.is_dir():
            raise DataError(f"missing train directory: {train_dir}")
        entries = tuple(CorpusEntry(p, "normal") for p in _list_images(train_dir))
        return CorpusIndex(category, "train", entries)
    if split != "test":
        raise DataError(f"split must be 'train' or 'test', got {split!r}")

    test_dir = category_dir / "test"
    entries = []
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for image_path in _list_images(defect_dir):
                if defect_dir.name == "good":
                    entries.append(CorpusEntry(image_path, "normal"))
                    continue
                gt_dir = category_dir / "ground_truth" / defect_dir.name
                candidates = [
                    gt_dir / f"{image_path.stem}_mask.png",
                    gt_dir / f"{image_path.stem}.png",
                ]
                mask_path = next((c for c in candidates if c.is_file()), None)
                if mask_path is None:
                    raise DataError(
                        f"anomalous image {image_path} has no ground-truth mask "
                        f"(looked for {candidates[0]})"
                    )
                entries.append(CorpusEntry(image_path, "anomalous", mask_path))
    return CorpusIndex(category, "test", tuple(entries))


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DefectTriplet:
    """Normal image, synthesized defect image, and binary mask."""

    normal: np.ndarray
    defect: np.ndarray
    mask: DefectMask
    meta: dict

    def validate(self) -> None:
        if self.normal.shape != self.defect.shape:
            raise DataError(
                f"triplet shape mismatch: normal {self.normal.shape} vs defect {self.defect.shape}"
            )
        if self.normal.shape[:2] != self.mask.shape:
            raise DataError(
                f"mask shape {self.mask.shape} does not match images {self.normal.shape[:2]}"
            )
        outside = self.mask.mask == 0
        if not np.array_equal(self.normal[outside], self.defect[outside]):
            raise DataError("defect image differs from normal image outside the mask")


class TripletStore:
    """On-disk triplet set: ``{normal,defect,mask}/NNNNN.png`` + manifest."""

    def __init__(self, root: str | Path, category: str) -> None:
        self.root = Path(root)
        self.category = category
        self.base = self.root / category
        self.manifest_path = self.base / "manifest.jsonl"
        self._records: list[dict] | None = None

    @property
    def records(self) -> list[dict]:
        if self._records is None:
            if not self.manifest_path.is_file():
                raise DataError(f"triplet manifest not found: {self.manifest_path}")
            with self.manifest_path.open() as fh:
                self._records = [json.loads(line) for line in fh if line.strip()]
        return self._records

    def __len__(self) -> int:
        return len(self.records)

    def load_triplet(self, index: int, validate: bool = True) -> DefectTriplet:
        """Load and decode one triplet to floats in [0, 1].

        Raises:
            DataError: for an out-of-range index, unreadable files, or (in
                validation mode) violated triplet invariants.
        """
        if not 0 <= index < len(self):
            raise DataError(f"triplet index {index} out of range [0, {len(self)})")
        record = self.records[index]
        normal = load_image(self.base / record["normal"])
        defect = load_image(self.base / record["defect"])
        mask = DefectMask(load_mask(self.base / record["mask"]))
        triplet = DefectTriplet(normal, defect, mask, dict(record))
        if validate:
            triplet.validate()
        return triplet

    def __iter__(self) -> Iterator[DefectTriplet]:
        for i in range(len(self)):
            yield self.load_triplet(i)


def _triplet_seed(base_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63 - 1))


def build_triplets(
    normals: CorpusIndex,
    out_root: str | Path,
    denoiser: torch.nn.Module,
    sched: VarianceSchedule,
    *,
    n_per_image: int,
    image_size: int,
    t_anom: int,
    sigma_extra: float,
    sample_steps: int | None,
    seed: int,
    grid_scale: int = 16,
    octaves: int = 2,
    persistence: float = 0.7,
    threshold_quantile: float = 0.85,
    max_area: float = 0.5,
    delta_range: tuple[float, float] = (0.3, 1.0),
    morph_op: str = "none",
    morph_kernel: int = 3,
    batch_size: int = 16,
) -> TripletStore:
    """Synthesize and persist ``n_per_image`` triplets per normal image.

    For each triplet: generate a global anomaly image from the source via the
    perturbed reverse chain, draw a noise mask, blend at a random opacity
    drawn from ``delta_range``, and write the three PNGs plus one manifest
    record. Fully deterministic given ``seed``.

    Raises:
        DataError: if the corpus is empty or a source image is unreadable.
    """
    if normals.split != "train":
        raise DataError(f"triplets are built from the train split, got {normals.split!r}")
    store = TripletStore(out_root, normals.category)
    store.base.mkdir(parents=True, exist_ok=True)
    jobs = [
        (entry, repeat)
        for entry in normals.entries
        for repeat in range(n_per_image)
    ]
    if n_per_image > 0 and not jobs:
        raise DataError("corpus has no normal images to synthesize from")

    records: list[dict] = []
    delta_lo, delta_hi = delta_range
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        images = [load_image(entry.image_path, image_size) for entry, _ in chunk]
        seeds = [_triplet_seed(seed, start + offset) for offset in range(len(chunk))]
        batch = torch.stack([to_tensor(img) for img in images])
        anomalies = generate_anomaly_batch(
            denoiser,
            batch,
            seeds,
            t_anom,
            sigma_extra,
            sched,
            sample_steps=sample_steps,
        )
        for offset, ((entry, _), normal) in enumerate(zip(chunk, images)):
            index = start + offset
            triplet_seed = seeds[offset]
            rng = np.random.default_rng(triplet_seed)
            mask, mask_meta = sample_defect_mask(
                image_size,
                image_size,
                rng,
                grid_scale=grid_scale,
                octaves=octaves,
                persistence=persistence,
                threshold_quantile=threshold_quantile,
                max_area=max_area,
                morph_op=morph_op,
                morph_kernel=morph_kernel,
            )
            delta = float(rng.uniform(delta_lo, delta_hi))
            anomaly = to_image(anomalies[offset])
            defect = blend_defect(normal, anomaly, mask, delta).astype(np.float32)
            name = f"{index:05d}.png"
            save_image_u8(store.base / "normal" / name, normal)
            save_image_u8(store.base / "defect" / name, defect)
            save_mask_png(store.base / "mask" / name, mask.mask)
            records.append(
                {
                    "index": index,
                    "source": str(entry.image_path.name),
                    "seed": triplet_seed,
                    "delta": delta,
                    "t_anom": t_anom,
                    "sigma_extra": sigma_extra,
                    "area_fraction": mask_meta["area_fraction"],
                    "threshold": mask_meta["threshold"],
                    "normal": f"normal/{name}",
                    "defect": f"defect/{name}",
                    "mask": f"mask/{name}",
                }
            )
        logger.info("synthesized %d/%d triplets", min(start + batch_size, len(jobs)), len(jobs))
    with store.manifest_path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    store._records = None
    return store


def load_corpus_images(
    corpus: CorpusIndex, image_size: int, labels: Sequence[str] = ("normal",)
) -> torch.Tensor:
    """Stack all corpus images with the given labels into one tensor."""
    picked = [e for e in corpus.entries if e.label in labels]
    if not picked:
        raise DataError(f"no {labels} images in {corpus.category}/{corpus.split}")
    return torch.stack([to_tensor(load_image(e.image_path, image_size)) for e in picked])
