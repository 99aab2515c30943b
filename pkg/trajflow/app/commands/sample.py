"""
sample: generate videos for dataset scenes from a trained checkpoint.
"""

import argparse
import logging
from pathlib import Path

from safetensors.torch import save_file
from tqdm import tqdm

from app.commands.common import prepare_output, resolve_config, write_resolved_config
from app.commands.train import CHECKPOINT_NAME
from app.config.settings import settings
from app.models.errors import EXIT_OK
from app.services.checkpoint import check_compatible, load_checkpoint, restore_model
from app.services.exceptions import DatasetError
from app.services.pipeline import check_scene_shape, load_dataset, sample_video, scene_sample_seed
from app.services.scene_io import write_frames

logger = logging.getLogger(__name__)

LATENT_NAME = "latent.safetensors"
DEFAULT_SAMPLE_SEED = 0


def add_parser(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("sample", parents=parents, help="Generate videos from a checkpoint")
    parser.add_argument("--checkpoint", help="Checkpoint file (default: <runs_dir>/full/checkpoint.safetensors)")
    parser.add_argument("--data", help="Dataset directory (default: the one the checkpoint was trained on)")
    parser.add_argument("--scenes", nargs="+", help="Scene ids to sample (default: all)")
    parser.add_argument("--steps", type=int, help="Euler steps (default: the checkpoint's sample_steps, 50)")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    """
    Write <out>/<scene_id>/frames/frame_%04d.png and the sampled latent per scene.

    Raises:
        CheckpointMismatchError: Scene shape or --config differs from the checkpoint
    """
    checkpoint_path = Path(args.checkpoint or Path(settings.runs_dir) / "full" / CHECKPOINT_NAME)
    out = prepare_output(Path(args.out or Path(settings.runs_dir) / "samples"), "resolved_config.json", args.force)
    seed = DEFAULT_SAMPLE_SEED if args.seed is None else args.seed

    checkpoint = load_checkpoint(checkpoint_path)
    config = checkpoint.config
    if args.config:
        requested = resolve_config(args, {}, base={"scene": config.scene.model_dump(mode="json")})
        check_compatible(checkpoint, requested)
    data_dir = Path(args.data or config.paths.data_dir or settings.data_dir)
    if args.steps is not None:
        config = config.model_copy(update={"flow": config.flow.model_copy(update={"sample_steps": args.steps})})
    model = restore_model(checkpoint)

    scenes = load_dataset(data_dir)
    if args.scenes:
        known = {sid for sid, _ in scenes}
        unknown = sorted(set(args.scenes) - known)
        if unknown:
            raise DatasetError(f"Unknown scene ids {unknown} in {data_dir}", field="scenes", value=unknown)
        scenes = [(sid, scene) for sid, scene in scenes if sid in set(args.scenes)]
    for sid, scene in scenes:
        check_scene_shape(config, scene, sid)

    write_resolved_config(out, config, extra={"name": "sample", "seed": seed, "steps": config.flow.sample_steps})
    for sid, scene in tqdm(scenes, desc="sampling scenes", disable=args.quiet):
        frames, latent = sample_video(model, scene, config, scene_sample_seed(seed, sid))
        write_frames(out / sid / "frames", frames)
        save_file({"latent": latent.contiguous()}, str(out / sid / LATENT_NAME),
                  metadata={"scene_id": sid, "seed": str(seed)})
        logger.info(f"Sampled {sid} ({frames.shape[0]} frames)", extra={"scene_id": sid})

    logger.info(f"Sampled {len(scenes)} scenes into {out} with {config.flow.sample_steps} steps")
    return EXIT_OK
