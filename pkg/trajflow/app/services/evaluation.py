"""
Evaluation of generated videos: reconstruction metrics, camera recovery from
the generated frames and trajectory errors against ground truth.

Camera recovery is photometric: every frame is matched against renders of the
clean scene cloud, first on a grid along the endpoint interpolation and then
by descent over small 6-DoF moves, coarse to fine.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from scipy.ndimage import gaussian_filter  # noqa: E402
from scipy.spatial.transform import Rotation  # noqa: E402

from app.config.settings import settings  # noqa: E402
from app.models.report import (  # noqa: E402
    PSNR_CAP_DB,
    AggregateReport,
    EvalReport,
    FramePoseError,
    SceneFailure,
)
from app.services.exceptions import InvalidInputError  # noqa: E402
from app.services.geometry import (  # noqa: E402
    CameraPose,
    compose,
    interpolate_pose,
    kabsch_align,
    normalize_trajectory,
    project_point_cloud,
)
from app.services.scenegen import SceneSample  # noqa: E402

logger = logging.getLogger(__name__)

MSE_FLOOR = 1e-10
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0

GRID_DIVISIONS = 64
NUM_STARTS = 3
# (blur sigma in pixels, rotation step in radians, translation step in world units)
SEARCH_LEVELS = (
    (1.5, 0.08, 0.1),
    (1.0, 0.04, 0.05),
    (0.5, 0.02, 0.025),
    (0.0, 0.01, 0.0125),
    (0.0, 0.005, 0.00625),
    (0.0, 0.0025, 0.003),
)
MAX_PASSES = 24
MIN_RENDER_COVERAGE = 0.05


# ===== Image metrics =====

def _check_images(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"Image shapes differ: {pred.shape} vs {gt.shape}", field="pred")
    return pred, gt


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio for images in [0, 1].

    Returns:
        10 log10(1 / MSE) in dB, capped at 99 dB (exact matches and MSE < 1e-10)
    """
    pred, gt = _check_images(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Structural similarity with uniform 8x8 windows (stride 1), K1 = 0.01,
    K2 = 0.03 and dynamic range 1, averaged over windows and channels.

    Args:
        pred: H x W x C (or H x W) image
        gt: Image with the same shape

    Returns:
        Mean SSIM index in [-1, 1]
    """
    pred, gt = _check_images(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    x = torch.from_numpy(np.ascontiguousarray(pred.transpose(2, 0, 1)))[None]
    y = torch.from_numpy(np.ascontiguousarray(gt.transpose(2, 0, 1)))[None]
    window = min(SSIM_WINDOW, x.shape[-2], x.shape[-1])

    mu_x = F.avg_pool2d(x, window, stride=1)
    mu_y = F.avg_pool2d(y, window, stride=1)
    mu_x_sq = mu_x * mu_x
    mu_y_sq = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_x_sq = F.avg_pool2d(x * x, window, stride=1) - mu_x_sq
    sigma_y_sq = F.avg_pool2d(y * y, window, stride=1) - mu_y_sq
    sigma_xy = F.avg_pool2d(x * y, window, stride=1) - mu_xy

    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_x_sq + mu_y_sq + c1) * (sigma_x_sq + sigma_y_sq + c2)
    )
    return float(ssim_map.mean().clamp(-1.0, 1.0))


# ===== Trajectory errors =====

def _check_trajectories(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> None:
    if len(pred_poses) != len(gt_poses):
        raise InvalidInputError(
            f"Trajectory lengths differ: {len(pred_poses)} vs {len(gt_poses)}", field="pred_poses"
        )
    if not pred_poses:
        raise InvalidInputError("Trajectories must contain at least one pose", field="pred_poses")


def translation_errors(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> np.ndarray:
    _check_trajectories(pred_poses, gt_poses)
    return np.array([
        float(np.linalg.norm(p.translation - g.translation)) for p, g in zip(pred_poses, gt_poses)
    ])


def rotation_errors(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> np.ndarray:
    _check_trajectories(pred_poses, gt_poses)
    cosines = [
        (np.trace(p.rotation @ g.rotation.T) - 1.0) / 2.0 for p, g in zip(pred_poses, gt_poses)
    ]
    return np.arccos(np.clip(np.array(cosines), -1.0, 1.0))


def translation_error(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> float:
    """E_t: mean Euclidean distance between translations. Callers normalize trajectories first."""
    return float(np.mean(translation_errors(pred_poses, gt_poses)))


def rotation_error(pred_poses: Sequence[CameraPose], gt_poses: Sequence[CameraPose]) -> float:
    """E_r: mean geodesic angle arccos((tr(R_pred R_gt^T) - 1) / 2), argument clamped to [-1, 1]."""
    return float(np.mean(rotation_errors(pred_poses, gt_poses)))


# ===== Camera recovery =====

@dataclass(frozen=True)
class RecoveredFrame:
    pose: CameraPose
    residual: float
    coverage: float
    reliable: bool


class _FrameObjective:
    """Photometric MSE between one frame and renders of the clean cloud, optionally blurred."""

    def __init__(self, scene: SceneSample, frame: np.ndarray):
        self.scene = scene
        self.frame = frame
        self._targets = {0.0: frame}

    def render(self, pose: CameraPose):
        return project_point_cloud(self.scene.clean_cloud, pose, self.scene.intrinsics)

    def _blur(self, image: np.ndarray, blur: float) -> np.ndarray:
        return gaussian_filter(image, sigma=(blur, blur, 0.0), mode="constant")

    def error(self, pose: CameraPose, blur: float = 0.0) -> float:
        if blur not in self._targets:
            self._targets[blur] = self._blur(self.frame, blur)
        rgb = self.render(pose).rgb
        if blur > 0.0:
            rgb = self._blur(rgb, blur)
        return float(np.mean((rgb - self._targets[blur]) ** 2))


def _pivot_depth(objective: _FrameObjective, pose: CameraPose) -> float:
    """Median rendered depth, the distance of the orbit pivot along the optical axis."""
    render = objective.render(pose)
    depths = render.depth[render.mask.astype(bool)]
    if depths.size == 0:
        return objective.scene.spec.camera_distance
    return float(np.median(depths))


def _search_steps(rot_step: float, trans_step: float, pivot_depth: float) -> List[CameraPose]:
    """
    Camera-frame moves tried at one search level: rotations about the camera
    center, translations, and orbits about a pivot on the optical axis (the
    coupled pan-plus-translate motion that keeps the viewed point in place).
    """
    pivot = np.array([0.0, 0.0, pivot_depth])
    steps = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            rotvec = np.zeros(3)
            rotvec[axis] = sign * rot_step
            rotation = Rotation.from_rotvec(rotvec).as_matrix()
            offset = np.zeros(3)
            offset[axis] = sign * trans_step
            steps.append(CameraPose(rotation, np.zeros(3)))
            steps.append(CameraPose(np.eye(3), offset))
            if axis < 2:
                steps.append(CameraPose(rotation, pivot - rotation @ pivot))
    return steps


def _descend(
    objective: _FrameObjective, pose: CameraPose, steps: List[CameraPose], blur: float
) -> Tuple[CameraPose, float]:
    """Best-improvement descent: take the best of all moves while it strictly lowers the error."""
    error = objective.error(pose, blur)
    for _ in range(MAX_PASSES):
        candidates = [compose(step, pose) for step in steps]
        errors = [objective.error(candidate, blur) for candidate in candidates]
        best = int(np.argmin(errors))
        if errors[best] >= error:
            break
        pose, error = candidates[best], errors[best]
    return pose, error


def fit_frame_pose(frame: np.ndarray, scene: SceneSample, threshold: float) -> RecoveredFrame:
    """
    Photometric pose fit of one frame against the clean scene cloud.

    The grid over s in {0, 1/64, ..., 1} ranks the interpolated endpoint poses
    (ties go to the smaller s). A grid pose that already reproduces the frame
    is kept. Otherwise the best few are polished on blurred images, and the
    best of them is refined at full resolution with shrinking steps. A start
    or move replaces the current pose only on a strict improvement.
    """
    frame = np.asarray(frame, dtype=np.float64)
    objective = _FrameObjective(scene, frame)
    first, last = scene.poses[0], scene.poses[-1]
    grid = [interpolate_pose(first, last, k / GRID_DIVISIONS) for k in range(GRID_DIVISIONS + 1)]
    grid_errors = np.array([objective.error(pose) for pose in grid])
    starts = np.argsort(grid_errors, kind="stable")[:NUM_STARTS]
    best_pose, best_error = grid[starts[0]], float(grid_errors[starts[0]])

    if best_error >= MSE_FLOOR:
        pivot_depth = _pivot_depth(objective, best_pose)
        coarse = [(blur, _search_steps(r, t, pivot_depth)) for blur, r, t in SEARCH_LEVELS if blur > 0.0]
        fine = [_search_steps(r, t, pivot_depth) for blur, r, t in SEARCH_LEVELS if blur == 0.0]

        for index in starts:
            pose = grid[index]
            for blur, steps in coarse:
                pose, _ = _descend(objective, pose, steps, blur)
            error = objective.error(pose)
            if error < best_error:
                best_pose, best_error = pose, error
        for steps in fine:
            best_pose, best_error = _descend(objective, best_pose, steps, 0.0)

    coverage = float(objective.render(best_pose).mask.mean())
    reliable = best_error <= threshold and coverage >= MIN_RENDER_COVERAGE
    return RecoveredFrame(pose=best_pose, residual=best_error, coverage=coverage, reliable=reliable)


def recover_trajectory(
    frames: np.ndarray,
    scene: SceneSample,
    threshold: Optional[float] = None,
    workers: Optional[int] = None,
) -> List[RecoveredFrame]:
    """
    Recover one camera per generated frame.

    Frames whose best fit leaves a residual above the threshold (or whose
    fitted render covers almost no pixels) are flagged unreliable but kept.

    Args:
        frames: T x H x W x 3 generated video in [0, 1]
        scene: Scene providing the clean cloud, intrinsics and endpoint cameras
        threshold: Residual MSE threshold (defaults to settings.recover_residual_threshold)
        workers: Threads used over frames (defaults to settings.eval_workers)

    Returns:
        One RecoveredFrame per input frame
    """
    frames = np.asarray(frames)
    expected = (scene.intrinsics.height, scene.intrinsics.width, 3)
    if frames.ndim != 4 or frames.shape[1:] != expected:
        raise InvalidInputError(
            f"Expected T x {expected[0]} x {expected[1]} x 3 frames, got {frames.shape}", field="frames"
        )
    threshold = settings.recover_residual_threshold if threshold is None else threshold
    workers = workers or settings.eval_workers

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda f: fit_frame_pose(f, scene, threshold), frames))
    else:
        results = [fit_frame_pose(f, scene, threshold) for f in frames]

    unreliable = [i for i, r in enumerate(results) if not r.reliable]
    if unreliable:
        logger.warning(f"Pose recovery unreliable for frames {unreliable}")
    return results


def pose_from_correspondences(scene: SceneSample) -> List[CameraPose]:
    """
    Recover every camera from the stored correspondences: back-project each
    pixel at its depth and align the world points onto the camera points.
    """
    intr = scene.intrinsics
    poses = []
    for i in range(scene.num_frames):
        u, v = scene.corr_pixels[:, i, 0], scene.corr_pixels[:, i, 1]
        z = scene.corr_depths[:, i]
        cam_points = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=-1)
        poses.append(kabsch_align(scene.corr_points, cam_points))
    return poses


# ===== Reports =====

def evaluate_scene(
    generated: np.ndarray,
    scene: SceneSample,
    scene_id: Optional[str] = None,
    threshold: Optional[float] = None,
    workers: Optional[int] = None,
) -> EvalReport:
    """
    Evaluate one generated video against its scene.

    PSNR/SSIM compare against the ground-truth frames; E_t/E_r compare the
    recovered and ground-truth trajectories after expressing both relative to
    their first camera.
    """
    generated = np.asarray(generated)
    if generated.shape != scene.frames.shape:
        raise InvalidInputError(
            f"Generated video {generated.shape} does not match scene frames {scene.frames.shape}",
            field="frames",
        )
    psnrs = [psnr(g, t) for g, t in zip(generated, scene.frames)]
    ssims = [ssim(g, t) for g, t in zip(generated, scene.frames)]

    recovered = recover_trajectory(generated, scene, threshold, workers)
    pred = normalize_trajectory([r.pose for r in recovered])
    gt = normalize_trajectory(scene.poses)
    t_errors = translation_errors(pred, gt)
    r_errors = rotation_errors(pred, gt)

    per_frame = [
        FramePoseError(
            frame=i,
            translation_error=float(t_errors[i]),
            rotation_error=float(r_errors[i]),
            residual=r.residual,
            reliable=r.reliable,
        )
        for i, r in enumerate(recovered)
    ]
    interior = psnrs[1:-1] or psnrs
    report = EvalReport(
        scene_id=scene_id,
        psnr_per_frame=psnrs,
        psnr_mean=float(np.mean(psnrs)),
        psnr_intermediate_mean=float(np.mean(interior)),
        ssim_per_frame=ssims,
        ssim_mean=float(np.mean(ssims)),
        translation_error=float(np.mean(t_errors)),
        rotation_error=float(np.mean(r_errors)),
        per_frame_pose_errors=per_frame,
        unreliable_frames=[p.frame for p in per_frame if not p.reliable],
    )
    logger.info(
        f"Evaluated scene: psnr={report.psnr_mean:.2f}dB ssim={report.ssim_mean:.4f} "
        f"E_t={report.translation_error:.4f} E_r={report.rotation_error:.4f}",
        extra={"scene_id": scene_id},
    )
    return report


def aggregate(reports: List[EvalReport], failures: Optional[List[SceneFailure]] = None) -> AggregateReport:
    """Means over the successfully evaluated scenes; None when there are none."""
    failures = failures or []
    if not reports:
        return AggregateReport(scenes=[], failures=failures, num_scenes=0)

    def mean(field: str) -> float:
        return float(np.mean([getattr(r, field) for r in reports]))

    return AggregateReport(
        scenes=reports,
        failures=failures,
        num_scenes=len(reports),
        psnr_mean=mean("psnr_mean"),
        psnr_intermediate_mean=mean("psnr_intermediate_mean"),
        ssim_mean=mean("ssim_mean"),
        translation_error=mean("translation_error"),
        rotation_error=mean("rotation_error"),
    )


def render_error_plot(report: EvalReport, path: Path) -> Path:
    """Write per-frame PSNR and pose-error curves as an SVG figure."""
    frames = list(range(len(report.psnr_per_frame)))
    fig, (ax_psnr, ax_pose) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    try:
        ax_psnr.plot(frames, report.psnr_per_frame, marker="o")
        ax_psnr.set_ylabel("PSNR (dB)")
        ax_psnr.set_title(report.scene_id or "scene")

        ax_pose.plot(frames, [p.translation_error for p in report.per_frame_pose_errors],
                     marker="o", label="translation")
        ax_pose.plot(frames, [p.rotation_error for p in report.per_frame_pose_errors],
                     marker="s", label="rotation (rad)")
        for frame in report.unreliable_frames:
            ax_pose.axvline(frame, color="grey", linestyle=":", linewidth=1)
        ax_pose.set_xlabel("frame")
        ax_pose.set_ylabel("pose error")
        ax_pose.legend()

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # fixed hash salt keeps the SVG ids stable between runs
        with matplotlib.rc_context({"svg.hashsalt": "trajflow"}):
            fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path
