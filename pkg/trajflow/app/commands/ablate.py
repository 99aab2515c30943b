"""
ablate: train and evaluate ablation variants over several seeds (and
optionally a sweep over the prior's noise level) and tabulate the results.
"""

import argparse
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import torch

from app.commands.common import prepare_output, resolve_config, write_resolved_config
from app.config.settings import settings
from app.models.config import VARIANT_DESCRIPTIONS, VARIANT_FLAGS
from app.models.errors import EXIT_NUMERICAL, EXIT_OK
from app.models.report import AblationRow, AblationTable, SeedResult
from app.services.checkpoint import run_config_from_dump
from app.services.exceptions import InvalidInputError, NumericalFailureError, PipelineError
from app.services.pipeline import evaluate_model, load_dataset, summarize, train_variant
from app.services.scene_io import read_manifest, write_json
from app.services.scenegen import with_noise
from app.utils.scene_cache import get_scene_cache

logger = logging.getLogger(__name__)

TABLE_NAME = "ablation.json"
TABLE_TEXT_NAME = "ablation.md"
METRICS = ("psnr", "ssim", "translation_error", "rotation_error")

FLAG_MAPPING = {
    "steps": "flow.train_steps",
    "lr": "flow.learning_rate",
    "batch_size": "flow.batch_size",
    "sample_steps": "flow.sample_steps",
}


def _csv(cast):
    def parse(text: str):
        try:
            return [cast(item) for item in text.split(",") if item.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def add_parser(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("ablate", parents=parents, help="Run the ablation matrix")
    parser.add_argument("--data", help="Dataset directory (default: settings data_dir)")
    parser.add_argument("--variants", type=_csv(str), default=["full"], help="Comma-separated variant tags")
    parser.add_argument("--seeds", type=int, default=5, help="Number of training seeds per variant")
    parser.add_argument("--sigmas", type=_csv(float),
                        help="Comma-separated prior noise levels; re-corrupts every scene per level")
    parser.add_argument("--steps", type=int, help="Training steps per run")
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int, help="Scenes per step")
    parser.add_argument("--sample-steps", type=int, help="Euler steps at evaluation")
    parser.add_argument("--workers", type=int, default=1, help="Parallel processes over table rows")
    parser.set_defaults(handler=run)
    return parser


def _init_worker(num_threads: int) -> None:
    torch.set_num_threads(num_threads)


def run_row(config_data: dict, data_dir: str, seeds: List[int], sigma: Optional[float]) -> dict:
    """
    Train and evaluate one variant (at one noise level) for every seed.
    Failures are recorded on the row instead of propagating.
    """
    config = run_config_from_dump(config_data)
    row = AblationRow(variant=config.variant, description=VARIANT_DESCRIPTIONS[config.variant], sigma=sigma)
    try:
        scenes = load_dataset(Path(data_dir))
        if sigma is not None:
            scenes = [(sid, with_noise(scene, sigma)) for sid, scene in scenes]
        for seed in seeds:
            run_config = config.model_copy(update={"flow": config.flow.model_copy(update={"seed": seed})})
            model, _ = train_variant(run_config, [scene for _, scene in scenes])
            summary = evaluate_model(model, scenes, run_config, seed)
            if summary.num_scenes == 0:
                raise NumericalFailureError(f"No scene could be evaluated for seed {seed}", field="seed", value=seed)
            row.seeds.append(SeedResult(
                seed=seed,
                psnr=summary.psnr_intermediate_mean,
                ssim=summary.ssim_mean,
                translation_error=summary.translation_error,
                rotation_error=summary.rotation_error,
            ))
            logger.info(
                f"Ablation run done: variant={config.variant} sigma={sigma} seed={seed} "
                f"psnr={summary.psnr_intermediate_mean:.2f} E_t={summary.translation_error:.4f}",
                extra={"variant": config.variant},
            )
    except PipelineError as exc:
        row.error = f"{exc.code.value}: {exc}"
    except Exception as exc:
        logger.error(f"Ablation row {config.variant} failed", exc_info=True, extra={"variant": config.variant})
        row.error = f"{type(exc).__name__}: {exc}"

    if row.error:
        logger.warning(f"Variant {config.variant} failed: {row.error}", extra={"variant": config.variant})
        return row.model_dump()
    for metric in METRICS:
        stats = summarize([getattr(result, metric) for result in row.seeds])
        setattr(row, f"{metric}_mean", stats["mean"])
        setattr(row, f"{metric}_std", stats["std"])
    return row.model_dump()


def format_table(table: AblationTable) -> str:
    """Markdown table, one row per variant and noise level (mean ± std over seeds)."""
    lines = [
        "| variant | description | sigma | PSNR (dB) | SSIM | E_t | E_r (rad) |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in table.rows:
        sigma = "-" if row.sigma is None else f"{row.sigma:g}"
        if row.error:
            lines.append(f"| {row.variant} | {row.description} | {sigma} | failed: {row.error} | | | |")
            continue
        lines.append(
            f"| {row.variant} | {row.description} | {sigma} "
            f"| {row.psnr_mean:.2f} ± {row.psnr_std:.2f} "
            f"| {row.ssim_mean:.4f} ± {row.ssim_std:.4f} "
            f"| {row.translation_error_mean:.4f} ± {row.translation_error_std:.4f} "
            f"| {row.rotation_error_mean:.4f} ± {row.rotation_error_std:.4f} |"
        )
    return "\n".join(lines) + "\n"


def run(args: argparse.Namespace) -> int:
    """
    Returns:
        0 when every row succeeded, 3 when at least one row failed (the table
        is written either way)
    """
    unknown = [v for v in args.variants if v not in VARIANT_FLAGS]
    if unknown or not args.variants:
        raise InvalidInputError(f"Unknown variants {unknown}; choose from {sorted(VARIANT_FLAGS)}",
                                field="variants", value=",".join(args.variants))
    if args.seeds < 1:
        raise InvalidInputError(f"--seeds must be >= 1, got {args.seeds}", field="seeds", value=args.seeds)

    data_dir = Path(args.data or settings.data_dir)
    manifest = read_manifest(data_dir)
    base = resolve_config(args, FLAG_MAPPING, base={"scene": manifest["spec"]})
    out = prepare_output(Path(args.out or Path(settings.runs_dir) / "ablation"), TABLE_NAME, args.force)
    write_resolved_config(out, base, extra={
        "name": "ablate", "variants": args.variants, "seeds": args.seeds, "sigmas": args.sigmas,
    })

    first_seed = args.seed or 0
    seeds = list(range(first_seed, first_seed + args.seeds))
    sigmas: List[Optional[float]] = list(args.sigmas) if args.sigmas else [None]
    jobs = [
        (base.model_copy(update={"variant": variant}).resolved_dump(), str(data_dir), seeds, sigma)
        for variant in args.variants
        for sigma in sigmas
    ]

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers, initializer=_init_worker,
                                 initargs=(settings.torch_num_threads,)) as pool:
            rows = list(pool.map(run_row, *zip(*jobs)))
    else:
        rows = [run_row(*job) for job in jobs]
        get_scene_cache().log_stats()

    table = AblationTable(rows=[AblationRow(**row) for row in rows], seeds=seeds,
                          train_steps=base.flow.train_steps)
    write_json(out / TABLE_NAME, table.model_dump(mode="json"))
    text = format_table(table)
    (out / TABLE_TEXT_NAME).write_text(text, encoding="utf-8")
    if not args.quiet:
        print(text, end="")

    failed = [row.variant for row in table.rows if row.error]
    if failed:
        logger.warning(f"Ablation rows failed: {failed}")
        return EXIT_NUMERICAL
    return EXIT_OK
