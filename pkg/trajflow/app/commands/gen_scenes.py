"""
gen-scenes: write a deterministic synthetic dataset.
"""

import argparse
import logging
from pathlib import Path

from tqdm import tqdm

from app.commands.common import resolve_config, write_resolved_config
from app.config.settings import settings
from app.models.errors import EXIT_OK
from app.services.exceptions import DatasetExistsError, InvalidInputError
from app.services.scene_io import (
    clear_dataset,
    dataset_exists,
    manifest_entry,
    save_scene,
    scene_id,
    write_manifest,
)
from app.services.scenegen import derive_seed, make_scene
from app.utils.scene_cache import get_scene_cache

logger = logging.getLogger(__name__)

FLAG_MAPPING = {
    "seed": "scene.seed",
    "sigma": "scene.depth_noise_sigma",
    "sharpness": "scene.conf_sharpness",
    "num_points": "scene.num_points",
    "num_frames": "scene.num_frames",
    "resolution": "scene.resolution",
    "spread": "scene.trajectory_spread",
}


def add_parser(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("gen-scenes", parents=parents, help="Generate a synthetic scene dataset")
    parser.add_argument("--num", type=int, default=8, help="Number of scenes (default: 8)")
    parser.add_argument("--sigma", type=float, help="Along-ray noise std of the prior cloud")
    parser.add_argument("--sharpness", type=float, help="Confidence decay rate")
    parser.add_argument("--num-points", type=int, help="Points per scene")
    parser.add_argument("--num-frames", type=int, help="Frames per trajectory (odd)")
    parser.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"), help="Frame size")
    parser.add_argument("--spread", type=float, help="Max endpoint rotation in radians")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    """
    Generate args.num scenes with seeds derived from the scene seed.

    Raises:
        DatasetExistsError: Output already holds a dataset and --force is not set
    """
    if args.num < 0:
        raise InvalidInputError(f"--num must be >= 0, got {args.num}", field="num", value=args.num)

    config = resolve_config(args, FLAG_MAPPING)
    out = Path(args.out or settings.data_dir)
    if dataset_exists(out):
        if not args.force:
            raise DatasetExistsError(str(out))
        clear_dataset(out)
    out.mkdir(parents=True, exist_ok=True)

    base = config.scene
    cache = get_scene_cache()
    entries = []
    for index in tqdm(range(args.num), desc="scenes", disable=args.quiet):
        spec = base.model_copy(update={"seed": derive_seed(base.seed, "scene", index)})
        scene = make_scene(spec)
        sid = scene_id(index)
        save_scene(scene, out / sid)
        cache.invalidate(out / sid)
        entries.append(manifest_entry(sid, scene))
        logger.debug(f"Wrote scene {sid}", extra={"scene_id": sid})

    write_manifest(out, base, entries)
    write_resolved_config(out, config)
    logger.info(f"Generated {len(entries)} scenes in {out} (sigma={base.depth_noise_sigma})")
    return EXIT_OK
