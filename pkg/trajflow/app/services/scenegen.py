"""
Deterministic synthetic multi-view scenes.

A scene is a cloud of colored blobs over a ground slab, filmed by a camera that
moves between two endpoint views looking at the scene centroid. The clean cloud
renders the frames; a corrupted copy with per-point confidence plays the role
of an estimated 3D prior.
"""

import dataclasses
import logging
import zlib
from dataclasses import dataclass
from typing import List

import numpy as np
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
)

from app.models.config import SceneSpec
from app.services.exceptions import FrustumCoverageError, InvalidInputError, SceneGenerationError
from app.services.geometry import (
    CameraIntrinsics,
    CameraPose,
    ConfidentPointCloud,
    frustum_mask,
    interpolate_pose,
    look_at,
    project_point_cloud,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 16
MIN_FRUSTUM_COVERAGE = 0.5
NUM_BLOBS = 4
BLOB_FRACTION = 0.6
NUM_CORRESPONDENCES = 32
MIN_CORRESPONDENCES = 8
GROUND_LEVEL = 0.5


def derive_seed(seed: int, *tags) -> int:
    """
    Derive an independent 64-bit sub-seed from a seed and a sequence of tags.

    Tags are hashed with CRC32 so the result is stable across processes and
    platforms (unlike the builtin hash()).
    """
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    entropy += [zlib.crc32(str(tag).encode("utf-8")) for tag in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def random_stream(seed: int, tag: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose tag)."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, tag)))


def _round_to_float32(values: np.ndarray) -> np.ndarray:
    """Snap to the nearest 32-bit value so the on-disk format round-trips exactly."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def _quantize_colors(codes: np.ndarray) -> np.ndarray:
    """8-bit color codes to floats in [0, 1] (the same mapping used when reading PNGs)."""
    return np.asarray(codes, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class SceneSample:
    """A complete synthetic record: frames, cameras, clouds and correspondences."""

    spec: SceneSpec
    frames: np.ndarray                 # T x H x W x 3, float32 in [0, 1]
    poses: List[CameraPose]
    intrinsics: CameraIntrinsics
    clean_cloud: ConfidentPointCloud   # confidence == 1
    noisy_cloud: ConfidentPointCloud
    corr_points: np.ndarray            # M x 3 world points
    corr_pixels: np.ndarray            # M x T x 2 continuous (u, v)
    corr_depths: np.ndarray            # M x T camera-space depth
    generation_seed: int               # sub-seed of the successful attempt

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def endpoint_indices(self) -> tuple:
        return (0, self.num_frames - 1)


def render_frames(
    cloud: ConfidentPointCloud, poses: List[CameraPose], intr: CameraIntrinsics
) -> np.ndarray:
    """Render a cloud under each pose; returns T x H x W x 3 float32."""
    return np.stack(
        [project_point_cloud(cloud, pose, intr).rgb.astype(np.float32) for pose in poses]
    )


def perturbation_confidence(magnitudes: np.ndarray, sigma: float, sharpness: float) -> np.ndarray:
    """
    Confidence of perturbed points, exp(-sharpness * |delta| / sigma).

    Args:
        magnitudes: Per-point perturbation norms
        sigma: Noise scale (confidence is 1 everywhere when sigma == 0)
        sharpness: Decay rate

    Returns:
        Confidence values in (0, 1]
    """
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if sigma == 0:
        return np.ones_like(magnitudes)
    return np.exp(-sharpness * magnitudes / sigma)


def corrupt_cloud(
    clean: ConfidentPointCloud,
    sigma: float,
    sharpness: float,
    seed: int,
    ray_origin: np.ndarray | None = None,
) -> ConfidentPointCloud:
    """
    Emulate depth-estimation error: move each point along its viewing ray.

    The offset along the ray from ray_origin (the first camera center) is drawn
    from N(0, sigma^2); confidence decays with the offset magnitude, so it is
    informative about the per-point error.

    Args:
        clean: Clean point cloud
        sigma: Noise standard deviation in world units (>= 0)
        sharpness: Confidence decay rate (> 0)
        seed: Seed of the perturbation stream
        ray_origin: Origin of the viewing rays (default: world origin)

    Returns:
        Corrupted cloud with confidence in (0, 1]
    """
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}", field="sigma", value=sigma)
    n = len(clean)
    if sigma == 0 or n == 0:
        return ConfidentPointCloud(clean.positions.copy(), clean.colors.copy(), np.ones(n))

    origin = np.zeros(3) if ray_origin is None else np.asarray(ray_origin, dtype=np.float64)
    rays = clean.positions - origin
    norms = np.linalg.norm(rays, axis=1, keepdims=True)
    unit = np.where(norms > 0, rays / np.where(norms > 0, norms, 1.0), np.array([0.0, 0.0, 1.0]))

    rng = random_stream(seed, "perturbation")
    offsets = rng.normal(0.0, sigma, size=n)
    positions = _round_to_float32(clean.positions + offsets[:, None] * unit)
    confidence = _round_to_float32(perturbation_confidence(np.abs(offsets), sigma, sharpness))
    return ConfidentPointCloud(positions, clean.colors.copy(), confidence)


def _sample_points(spec: SceneSpec, seed: int) -> ConfidentPointCloud:
    rng = random_stream(seed, "points")
    color_rng = random_stream(seed, "colors")

    n_blob = int(round(BLOB_FRACTION * spec.num_points))
    n_ground = spec.num_points - n_blob

    centers = np.column_stack([
        rng.uniform(-0.5, 0.5, NUM_BLOBS),
        rng.uniform(-0.35, 0.2, NUM_BLOBS),
        rng.uniform(-0.5, 0.5, NUM_BLOBS),
    ])
    radii = rng.uniform(0.12, 0.25, NUM_BLOBS)
    labels = rng.integers(0, NUM_BLOBS, n_blob)
    blob_points = centers[labels] + rng.normal(0.0, 1.0, (n_blob, 3)) * radii[labels, None]

    ground_points = np.column_stack([
        rng.uniform(-0.9, 0.9, n_ground),
        GROUND_LEVEL + rng.uniform(-0.03, 0.03, n_ground),
        rng.uniform(-0.9, 0.9, n_ground),
    ])

    base = color_rng.integers(40, 256, (NUM_BLOBS, 3))
    jitter = color_rng.integers(-15, 16, (n_blob, 3))
    blob_codes = np.clip(base[labels] + jitter, 0, 255)

    tiles = color_rng.integers(40, 256, (2, 3))
    parity = (np.floor(ground_points[:, 0] * 4) + np.floor(ground_points[:, 2] * 4)).astype(np.int64) % 2
    ground_codes = tiles[parity]

    positions = _round_to_float32(np.concatenate([blob_points, ground_points]))
    colors = _quantize_colors(np.concatenate([blob_codes, ground_codes]))
    return ConfidentPointCloud(positions, colors, np.ones(spec.num_points))


def _endpoint_poses(spec: SceneSpec, seed: int, target: np.ndarray) -> tuple:
    rng = random_stream(seed, "trajectory")
    center_azimuth = rng.uniform(-np.pi, np.pi)
    elevations = rng.uniform(0.15, 0.45, 2)
    azimuths = center_azimuth + np.array([-0.5, 0.5]) * spec.trajectory_spread

    poses = []
    for azimuth, elevation in zip(azimuths, elevations):
        direction = np.array([
            np.sin(azimuth) * np.cos(elevation),
            -np.sin(elevation),
            -np.cos(azimuth) * np.cos(elevation),
        ])
        poses.append(look_at(target + spec.camera_distance * direction, target))
    return poses[0], poses[1]


def _generate(spec: SceneSpec, seed: int) -> SceneSample:
    height, width = spec.resolution
    intr = CameraIntrinsics.centered(width, height, focal=spec.focal_scale * width)

    clean = _sample_points(spec, seed)
    centroid = clean.positions.mean(axis=0)
    first, last = _endpoint_poses(spec, seed, centroid)
    t_count = spec.num_frames
    poses = [interpolate_pose(first, last, i / (t_count - 1)) for i in range(t_count)]

    in_all = np.ones(len(clean), dtype=bool)
    for pose in poses:
        in_all &= frustum_mask(clean, pose, intr)
    coverage = float(in_all.mean())
    candidates = np.nonzero(in_all)[0]
    if coverage < MIN_FRUSTUM_COVERAGE or candidates.size < MIN_CORRESPONDENCES:
        raise FrustumCoverageError(seed, coverage, MIN_FRUSTUM_COVERAGE)

    frames = render_frames(clean, poses, intr)
    noisy = corrupt_cloud(
        clean,
        spec.depth_noise_sigma,
        spec.conf_sharpness,
        seed=derive_seed(seed, "noise"),
        ray_origin=poses[0].center,
    )

    corr_rng = random_stream(seed, "correspondences")
    m = min(NUM_CORRESPONDENCES, candidates.size)
    chosen = np.sort(corr_rng.choice(candidates, size=m, replace=False))
    corr_points = clean.positions[chosen]
    corr_pixels = np.zeros((m, t_count, 2))
    corr_depths = np.zeros((m, t_count))
    for i, pose in enumerate(poses):
        cam = pose.apply(corr_points)
        corr_depths[:, i] = cam[:, 2]
        corr_pixels[:, i, 0] = intr.fx * cam[:, 0] / cam[:, 2] + intr.cx
        corr_pixels[:, i, 1] = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy

    return SceneSample(
        spec=spec,
        frames=frames,
        poses=poses,
        intrinsics=intr,
        clean_cloud=clean,
        noisy_cloud=noisy,
        corr_points=corr_points,
        corr_pixels=corr_pixels,
        corr_depths=corr_depths,
        generation_seed=seed,
    )


def make_scene(spec: SceneSpec) -> SceneSample:
    """
    Generate a scene deterministically from its spec.

    Attempts whose trajectory keeps fewer than half of the points inside every
    frustum are regenerated with derived sub-seeds, up to MAX_ATTEMPTS times.

    Args:
        spec: Scene parameters

    Returns:
        SceneSample

    Raises:
        SceneGenerationError: No attempt satisfied the coverage requirement
    """
    retrying = Retrying(
        stop=stop_after_attempt(MAX_ATTEMPTS),
        retry=retry_if_exception_type(FrustumCoverageError),
        before_sleep=before_sleep_log(logger, logging.DEBUG),
        reraise=True,
    )
    try:
        for attempt in retrying:
            with attempt:
                number = attempt.retry_state.attempt_number
                seed = spec.seed if number == 1 else derive_seed(spec.seed, "attempt", number - 1)
                sample = _generate(spec, seed)
    except FrustumCoverageError as exc:
        logger.error(f"Scene generation failed after {MAX_ATTEMPTS} attempts: seed={spec.seed}")
        raise SceneGenerationError(
            f"No trajectory with {MIN_FRUSTUM_COVERAGE:.0%} frustum coverage after "
            f"{MAX_ATTEMPTS} attempts (last coverage {exc.coverage:.1%})",
            field="seed",
            value=spec.seed,
        ) from exc

    logger.debug(
        f"Generated scene: seed={spec.seed}, attempt_seed={sample.generation_seed}, "
        f"points={spec.num_points}, frames={spec.num_frames}, sigma={spec.depth_noise_sigma}"
    )
    return sample


def with_noise(scene: SceneSample, sigma: float, sharpness: float | None = None) -> SceneSample:
    """
    Re-corrupt a scene's clean cloud at a different noise level.

    The perturbation stream is the scene's own, so a sweep over sigma moves the
    same points by proportionally larger offsets.
    """
    sharpness = scene.spec.conf_sharpness if sharpness is None else sharpness
    noisy = corrupt_cloud(
        scene.clean_cloud,
        sigma,
        sharpness,
        seed=derive_seed(scene.generation_seed, "noise"),
        ray_origin=scene.poses[0].center,
    )
    spec = scene.spec.model_copy(update={"depth_noise_sigma": sigma, "conf_sharpness": sharpness})
    return dataclasses.replace(scene, spec=spec, noisy_cloud=noisy)
