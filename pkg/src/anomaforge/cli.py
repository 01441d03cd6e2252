"""Command-line surface tying the pipeline together.

Commands::

    anomaforge train-ddpm      --config run.toml [--set k=v ...]
    anomaforge synthesize      --config run.toml [--set k=v ...]
    anomaforge train-detector  --config run.toml [--set k=v ...]
    anomaforge evaluate        --config run.toml [--visualize] [--set k=v ...]
    anomaforge visualize       --config run.toml [--set k=v ...]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
All artifacts land under ``work_dir`` (config key or ``ANOMAFORGE_WORKDIR``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_config, save_config
from .data import (
    TripletStore,
    build_triplets,
    load_corpus_images,
    load_image,
    load_mask,
    scan_mvtec_layout,
)
from .diffusion import (
    DenoiserNet,
    load_ddpm_checkpoint,
    make_schedule,
    save_ddpm_checkpoint,
    train_denoiser,
)
from .errors import DataError, PipelineError
from .inference import detect
from .metrics import compute_report
from .network import DetectorConfig, DetectorModel, load_detector
from .training import LossConfig, train_detector
from .visualize import read_score_png16, render_panel, write_score_png16

logger = logging.getLogger(__name__)


def _seeded_denoiser(cfg: RunConfig) -> DenoiserNet:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return DenoiserNet(
            image_channels=3,
            base_channels=cfg.ddpm_base_channels,
            channel_mults=cfg.ddpm_channel_mults,
        )


def _detector_config(cfg: RunConfig) -> DetectorConfig:
    return DetectorConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        embed_dim=cfg.embed_dim,
        depth=cfg.vit_depth,
        num_heads=cfg.vit_heads,
        level_taps=cfg.level_taps,
        decoder_channels=cfg.decoder_channels,
        decoder_depth=cfg.decoder_depth,
        seg_hidden=cfg.seg_hidden,
        use_decoder=cfg.use_decoder,
        use_seg_head=cfg.use_seg_head,
        teacher_seed=cfg.teacher_seed,
        student_seed=cfg.seed + 1,
    )


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(
        lambda_cos=cfg.lambda_cos,
        lambda_focal=cfg.lambda_focal,
        lambda_l1=cfg.lambda_l1,
        focal_gamma=cfg.focal_gamma,
        focal_alpha=cfg.focal_alpha,
        use_decoder=cfg.use_decoder,
        use_cosine=cfg.use_cosine,
        use_seg_head=cfg.use_seg_head,
        use_focal=cfg.use_focal,
        use_l1=cfg.use_l1,
    )


def cmd_train_ddpm(cfg: RunConfig) -> int:
    """Train the denoiser on the category's normal images."""
    work_dir = cfg.resolve_work_dir()
    work_dir.mkdir(parents=True, exist_ok=True)
    corpus = scan_mvtec_layout(cfg.data_root, cfg.category, "train")
    images = load_corpus_images(corpus, cfg.image_size).to(cfg.device)
    logger.info("training denoiser on %d normal images", images.shape[0])
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    net = _seeded_denoiser(cfg).to(cfg.device)
    train_denoiser(
        net,
        images,
        sched,
        steps=cfg.ddpm_train_steps,
        batch_size=cfg.ddpm_batch_size,
        lr=cfg.ddpm_lr,
        seed=cfg.seed,
        log_path=work_dir / "ddpm_loss.csv",
    )
    save_ddpm_checkpoint(
        work_dir / "ddpm.pt",
        net,
        {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        {
            "t_anom": cfg.t_anom,
            "sigma_extra": cfg.sigma_extra,
            "image_size": cfg.image_size,
            "seed": cfg.seed,
        },
    )
    save_config(cfg, work_dir / "resolved_config.toml")
    print(f"ddpm checkpoint written to {work_dir / 'ddpm.pt'}")
    return 0


def cmd_synthesize(cfg: RunConfig) -> int:
    """Build the persisted triplet store from the trained denoiser."""
    work_dir = cfg.resolve_work_dir()
    ckpt = work_dir / "ddpm.pt"
    if not ckpt.is_file():
        raise DataError(f"diffusion checkpoint not found: {ckpt} (run train-ddpm first)")
    net, sched, _ = load_ddpm_checkpoint(ckpt)
    net = net.to(cfg.device)
    corpus = scan_mvtec_layout(cfg.data_root, cfg.category, "train")
    store = build_triplets(
        corpus,
        work_dir / "triplets",
        net,
        sched,
        n_per_image=cfg.n_per_image,
        image_size=cfg.image_size,
        t_anom=cfg.t_anom,
        sigma_extra=cfg.sigma_extra,
        sample_steps=cfg.sample_steps or None,
        seed=cfg.seed,
        grid_scale=cfg.perlin_grid_scale,
        octaves=cfg.perlin_octaves,
        persistence=cfg.perlin_persistence,
        threshold_quantile=cfg.mask_threshold_quantile,
        max_area=cfg.mask_max_area,
        delta_range=(cfg.delta_min, cfg.delta_max),
        morph_op=cfg.morph_op,
        morph_kernel=cfg.morph_kernel,
        batch_size=cfg.synth_batch_size,
    )
    areas = [record["area_fraction"] for record in store.records]
    mean_area = float(np.mean(areas)) if areas else 0.0
    print(f"triplets={len(store)} mean_area_fraction={mean_area:.4f}")
    return 0


def cmd_train_detector(cfg: RunConfig) -> int:
    """Joint training of the student and segmentation head on triplets."""
    work_dir = cfg.resolve_work_dir()
    store = TripletStore(work_dir / "triplets", cfg.category)
    if not store.manifest_path.is_file():
        raise DataError(f"triplet store not found: {store.manifest_path} (run synthesize first)")
    model = DetectorModel(_detector_config(cfg), cfg.teacher_weights or None)
    train_detector(
        model,
        store,
        _loss_config(cfg),
        steps=cfg.det_train_steps,
        batch_size=cfg.det_batch_size,
        lr=cfg.det_lr,
        seed=cfg.seed,
        log_path=work_dir / "detector_loss.csv",
        checkpoint_path=work_dir / "detector.pt",
        checkpoint_every=cfg.checkpoint_every,
        device=cfg.device,
    )
    print(f"detector checkpoint written to {work_dir / 'detector.pt'}")
    return 0


def _eval_id(entry_path: Path, label: str) -> str:
    return f"{entry_path.parent.name}_{entry_path.stem}"


def cmd_evaluate(cfg: RunConfig, visualize: bool = False) -> int:
    """Score the test corpus and write metric reports and per-image records."""
    work_dir = cfg.resolve_work_dir()
    model = load_detector(work_dir / "detector.pt")
    corpus = scan_mvtec_layout(cfg.data_root, cfg.category, "test")
    labels = [1 if e.label == "anomalous" else 0 for e in corpus.entries]
    if sum(labels) == 0 or sum(labels) == len(labels):
        raise DataError(
            "test corpus must contain both normal and anomalous images; "
            "image-level metrics are undefined otherwise"
        )
    eval_dir = work_dir / "eval"
    scores_dir = eval_dir / "scores"
    eval_dir.mkdir(parents=True, exist_ok=True)

    image_scores: list[float] = []
    maps: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    records: list[dict] = []
    for entry in corpus.entries:
        image = load_image(entry.image_path, cfg.image_size)
        result = detect(model, image, top_k=cfg.top_k, top_k_reference=cfg.top_k_reference)
        mask = (
            load_mask(entry.mask_path, cfg.image_size)
            if entry.mask_path is not None
            else np.zeros(result.pixel_map.shape, dtype=np.uint8)
        )
        image_id = _eval_id(entry.image_path, entry.label)
        write_score_png16(scores_dir / f"{image_id}.png", result.pixel_map)
        image_scores.append(result.image_score)
        maps.append(result.pixel_map)
        masks.append(mask)
        records.append(
            {
                "id": image_id,
                "source": str(entry.image_path),
                "label": entry.label,
                "image_score": result.image_score,
                "k": result.k_used,
            }
        )
        if visualize:
            render_panel(
                image,
                mask if entry.mask_path is not None else None,
                result.pixel_map,
                eval_dir / "overlays" / f"{image_id}.png",
                title=image_id,
            )
    with (eval_dir / "records.jsonl").open("w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    report = compute_report(
        image_scores,
        labels,
        maps,
        masks,
        category=cfg.category,
        fpr_limit=cfg.fpr_limit,
    )
    report.to_json(eval_dir / "report.json")
    report.to_csv(eval_dir / "report.csv")
    print(
        f"i_auroc={report.i_auroc:.4f} p_auroc={report.p_auroc:.4f} "
        f"aupro={report.aupro:.4f} images={report.n_images}"
    )
    return 0


def cmd_visualize(cfg: RunConfig) -> int:
    """Render overlay panels from a completed evaluation run."""
    work_dir = cfg.resolve_work_dir()
    eval_dir = work_dir / "eval"
    records_path = eval_dir / "records.jsonl"
    if not records_path.is_file():
        raise DataError(f"no evaluation records at {records_path} (run evaluate first)")
    with records_path.open() as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    count = 0
    for record in records:
        score_path = eval_dir / "scores" / f"{record['id']}.png"
        source = Path(record["source"])
        if not score_path.is_file() or not source.is_file():
            raise DataError(f"missing artifacts for record {record['id']}")
        image = load_image(source, cfg.image_size)
        score_map = read_score_png16(score_path)
        mask = None
        if record["label"] == "anomalous":
            corpus = scan_mvtec_layout(cfg.data_root, cfg.category, "test")
            for entry in corpus.entries:
                if str(entry.image_path) == record["source"] and entry.mask_path:
                    mask = load_mask(entry.mask_path, cfg.image_size)
                    break
        render_panel(
            image,
            mask,
            score_map,
            eval_dir / "overlays" / f"{record['id']}.png",
            title=record["id"],
        )
        count += 1
    print(f"wrote {count} overlay panels to {eval_dir / 'overlays'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomaforge",
        description="Defect synthesis and detection pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train-ddpm", "train the denoiser on normal images"),
        ("synthesize", "build the synthetic defect triplet store"),
        ("train-detector", "train the dual-stream detector on triplets"),
        ("evaluate", "score the test corpus and write metric reports"),
        ("visualize", "render overlay heatmaps from evaluation outputs"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the flat TOML config")
        cmd.add_argument(
            "--set",
            dest="overrides",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        if name == "evaluate":
            cmd.add_argument(
                "--visualize", action="store_true", help="also render overlay heatmaps"
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "train-ddpm":
            return cmd_train_ddpm(cfg)
        if args.command == "synthesize":
            return cmd_synthesize(cfg)
        if args.command == "train-detector":
            return cmd_train_detector(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, visualize=args.visualize)
        if args.command == "visualize":
            return cmd_visualize(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
