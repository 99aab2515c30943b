"""
Orchestration shared by the commands: building scenes into training data,
training a variant, sampling videos and evaluating them.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.models.config import RunConfig
from app.models.report import AggregateReport, EvalReport, SceneFailure
from app.services.backbone import VelocityNetwork, build_model
from app.services.conditioning import build_conditioning, stack_conditioning
from app.services.evaluation import aggregate, evaluate_scene
from app.services.exceptions import CheckpointMismatchError, EmptyInputError, PipelineError
from app.services.flow import FlowTrainer, StepResult, generate
from app.services.latent_codec import LatentVideo, decode
from app.services.scene_io import from_uint8, read_manifest, to_uint8
from app.services.scenegen import SceneSample, derive_seed
from app.utils.scene_cache import SceneCache, get_scene_cache

logger = logging.getLogger(__name__)


def load_dataset(root: Path, cache: Optional[SceneCache] = None) -> List[Tuple[str, SceneSample]]:
    """
    Load every scene listed in a dataset manifest, in manifest order, through
    the process-wide scene cache unless another cache is given.

    Raises:
        DatasetError: No manifest
    """
    root = Path(root)
    if cache is None:
        cache = get_scene_cache()
    manifest = read_manifest(root)
    scenes = [(entry["id"], cache.load(root / entry["id"])) for entry in manifest.get("scenes", [])]
    logger.info(f"Loaded {len(scenes)} scenes from {root}")
    return scenes


def check_scene_shape(config: RunConfig, scene: SceneSample, scene_id: str = "") -> None:
    """
    Raises:
        CheckpointMismatchError: Scene frames do not match the model shape
    """
    model = config.model
    expected = (model.num_frames, model.image_height, model.image_width)
    actual = scene.frames.shape[:3]
    if tuple(actual) != expected:
        raise CheckpointMismatchError(
            f"Scene {scene_id or scene.spec.seed} has T x H x W = {tuple(actual)}, model expects {expected}",
            field="scene",
        )


def make_trainer(
    config: RunConfig,
    scenes: Sequence[SceneSample],
    model: Optional[VelocityNetwork] = None,
) -> FlowTrainer:
    """Build (or reuse) the model of a run and a trainer over the given scenes."""
    if not scenes:
        raise EmptyInputError("No scenes to train on", field="data")
    for scene in scenes:
        check_scene_shape(config, scene)
    flags = config.flags
    model = model or build_model(config.model, flags, seed=config.flow.seed)
    conds = [build_conditioning(scene, config.model.patch_size, flags) for scene in scenes]
    return FlowTrainer(model, conds, config.flow, flags)


def train_variant(
    config: RunConfig,
    scenes: Sequence[SceneSample],
    on_step: Optional[Callable[[StepResult], None]] = None,
    progress: bool = False,
) -> Tuple[VelocityNetwork, List[StepResult]]:
    """Train a fresh model for config.flow.train_steps steps."""
    trainer = make_trainer(config, scenes)
    results = trainer.fit(0, config.flow.train_steps, on_step=on_step, progress=progress)
    return trainer.model, results


def sample_video(
    model: VelocityNetwork,
    scene: SceneSample,
    config: RunConfig,
    seed: int,
    steps: Optional[int] = None,
    progress: bool = False,
) -> Tuple[np.ndarray, torch.Tensor]:
    """
    Generate the video of one scene.

    Returns:
        (frames T x H x W x 3 float32 in [0, 1], latent T x C x H' x W'). The
        conditioned endpoint frames are copied from the scene, so they equal
        the conditioning frames exactly.
    """
    check_scene_shape(config, scene)
    flags = config.flags
    cond = build_conditioning(scene, config.model.patch_size, flags)
    dtype = next(model.parameters()).dtype
    latent = generate(model, stack_conditioning([cond]).to(dtype), config.flow, flags, seed,
                      steps=steps, progress=progress)[0].to(torch.float32)
    video = LatentVideo(latent, config.model.patch_size, tuple(scene.frames.shape[:3]))
    frames = decode(video).numpy().clip(0.0, 1.0).astype(np.float32)
    for index in np.nonzero(cond.endpoint_mask.numpy())[0]:
        frames[index] = scene.frames[index]
    return frames, latent


def scene_sample_seed(seed: int, scene_id: str) -> int:
    return derive_seed(seed, "sample", scene_id)


def evaluate_model(
    model: VelocityNetwork,
    scenes: Sequence[Tuple[str, SceneSample]],
    config: RunConfig,
    seed: int,
    steps: Optional[int] = None,
) -> AggregateReport:
    """
    Sample and evaluate every scene in memory. Frames pass through the same
    8-bit quantization as the on-disk pipeline.
    """
    reports: List[EvalReport] = []
    failures: List[SceneFailure] = []
    for sid, scene in scenes:
        try:
            frames, _ = sample_video(model, scene, config, scene_sample_seed(seed, sid), steps)
            reports.append(evaluate_scene(from_uint8(to_uint8(frames)), scene, scene_id=sid))
        except PipelineError as exc:
            logger.warning(f"Evaluation failed: {exc}", extra={"scene_id": sid})
            failures.append(SceneFailure(scene_id=sid, code=exc.code.value, message=str(exc)))
    return aggregate(reports, failures)


def summarize(values: List[float]) -> Dict[str, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return {"mean": float(array.mean()), "std": std}
