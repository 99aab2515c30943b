"""
Pinhole camera geometry.

Conventions: poses are world-to-camera, the camera looks along +z, pixel (0, 0)
is the top-left pixel and pixel centers sit at integer + 0.5.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from app.services.exceptions import DegenerateAlignmentError, InvalidInputError

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4
DEPTH_SENTINEL = np.inf
ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}",
                                    field="intrinsics")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"Image size must be >= 1, got {self.width}x{self.height}",
                                    field="intrinsics")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "CameraIntrinsics":
        """Square pixels with the principal point at the image center."""
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-to-camera transform x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidInputError("Pose contains non-finite values", field="pose")
        orth_err = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        det = np.linalg.det(rotation)
        if orth_err >= ORTHONORMAL_TOL or abs(det - 1.0) >= ORTHONORMAL_TOL:
            raise InvalidInputError(
                f"Rotation is not a proper rotation (orthonormality error {orth_err:.2e}, det {det:.6f})",
                field="rotation"
            )
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "CameraPose":
        """Build a pose from a 4x4 (or 3x4) world-to-camera matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, c = -R^T t."""
        return -self.rotation.T @ self.translation

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform N x 3 world points into camera coordinates."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ConfidentPointCloud:
    """World-space points with per-point color and confidence."""

    positions: np.ndarray
    colors: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        confidence = np.asarray(self.confidence, dtype=np.float64).reshape(n)
        if not np.all(np.isfinite(positions)):
            raise InvalidInputError("Point positions must be finite", field="positions")
        if n and (confidence.min() < 0.0 or confidence.max() > 1.0):
            raise InvalidInputError("Confidence values must lie in [0, 1]", field="confidence")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "confidence", confidence)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "ConfidentPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    def transformed(self, pose: CameraPose) -> "ConfidentPointCloud":
        """Rigidly move the cloud by pose (positions become pose.apply(positions))."""
        return ConfidentPointCloud(pose.apply(self.positions), self.colors, self.confidence)


@dataclass(frozen=True)
class PluckerImage:
    """Per-pixel ray direction d (unit, world space) and moment m = c x d."""

    directions: np.ndarray
    moments: np.ndarray

    def as_channels(self) -> np.ndarray:
        """6 x H x W array (directions first, then moments)."""
        return np.concatenate([self.directions, self.moments], axis=-1).transpose(2, 0, 1)


@dataclass(frozen=True)
class ProjectionFrame:
    """Z-buffered splat of a point cloud into one camera."""

    rgb: np.ndarray
    depth: np.ndarray
    conf: np.ndarray
    mask: np.ndarray
    point_index: np.ndarray = field(repr=False)  # winning point per pixel, -1 when empty


def pixel_grid(intr: CameraIntrinsics) -> np.ndarray:
    """H x W x 2 array of pixel-center coordinates (u, v)."""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v, indexing="xy")
    return np.stack([uu, vv], axis=-1)


def plucker_embedding(pose: CameraPose, intr: CameraIntrinsics) -> PluckerImage:
    """
    Per-pixel Plücker coordinates of the rays through pixel centers.

    Args:
        pose: World-to-camera pose
        intr: Camera intrinsics

    Returns:
        PluckerImage with unit world-space directions and moments c x d
    """
    grid = pixel_grid(intr)
    cam_dirs = np.stack(
        [
            (grid[..., 0] - intr.cx) / intr.fx,
            (grid[..., 1] - intr.cy) / intr.fy,
            np.ones(grid.shape[:2]),
        ],
        axis=-1,
    )
    # world direction = R^T d_cam
    directions = cam_dirs @ pose.rotation
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    moments = np.cross(np.broadcast_to(pose.center, directions.shape), directions)
    return PluckerImage(directions=directions, moments=moments)


def _rasterize(cam_points: np.ndarray, intr: CameraIntrinsics):
    """Pixel indices and depths of the camera-space points that land in the image."""
    depth = cam_points[:, 2]
    in_front = depth > NEAR_PLANE
    safe_depth = np.where(in_front, depth, 1.0)
    u = intr.fx * cam_points[:, 0] / safe_depth + intr.cx
    v = intr.fy * cam_points[:, 1] / safe_depth + intr.cy
    col = np.floor(u)
    row = np.floor(v)
    valid = in_front & (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height)
    row = np.where(valid, row, 0).astype(np.int64)
    col = np.where(valid, col, 0).astype(np.int64)
    return valid, row, col, depth


def project_point_cloud(
    pc: ConfidentPointCloud, pose: CameraPose, intr: CameraIntrinsics
) -> ProjectionFrame:
    """
    Splat a point cloud into a camera with nearest-pixel footprint and a z-buffer.

    Points with depth at or behind the near plane are culled. Per pixel the
    closest point wins; equal depths go to the lower point index. The winner's
    color and confidence fill the pixel.

    Args:
        pc: Point cloud in world coordinates
        pose: World-to-camera pose
        intr: Camera intrinsics

    Returns:
        ProjectionFrame with rgb, depth (inf where empty), conf and mask
    """
    h, w = intr.height, intr.width
    rgb = np.zeros((h, w, 3))
    depth_img = np.full((h, w), DEPTH_SENTINEL)
    conf = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    winner = np.full((h, w), -1, dtype=np.int64)

    if len(pc) == 0:
        return ProjectionFrame(rgb, depth_img, conf, mask, winner)

    cam_points = pose.apply(pc.positions)
    valid, row, col, depth = _rasterize(cam_points, intr)
    idx = np.nonzero(valid)[0]
    if idx.size:
        flat = row[idx] * w + col[idx]
        # sort by (depth, point index) and keep the first hit per pixel
        order = np.lexsort((idx, depth[idx]))
        flat_sorted = flat[order]
        _, first = np.unique(flat_sorted, return_index=True)
        chosen = idx[order[first]]
        pix = flat_sorted[first]
        rows, cols = pix // w, pix % w
        rgb[rows, cols] = pc.colors[chosen]
        depth_img[rows, cols] = depth[chosen]
        conf[rows, cols] = pc.confidence[chosen]
        mask[rows, cols] = 1
        winner[rows, cols] = chosen

    return ProjectionFrame(rgb, depth_img, conf, mask, winner)


def frustum_mask(pc: ConfidentPointCloud, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Boolean mask of points that project inside the image in front of the near plane."""
    if len(pc) == 0:
        return np.zeros(0, dtype=bool)
    valid, _, _, _ = _rasterize(pose.apply(pc.positions), intr)
    return valid


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose that applies b first, then a."""
    return CameraPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: CameraPose) -> CameraPose:
    """Two-sided inverse of a rigid transform."""
    rt = a.rotation.T
    return CameraPose(rt, -rt @ a.translation)


def interpolate_pose(a: CameraPose, b: CameraPose, s: float) -> CameraPose:
    """
    Interpolate between two poses.

    Rotation uses spherical-linear interpolation of unit quaternions along the
    shortest arc; translation is interpolated linearly. s = 0 and s = 1 return
    the endpoints unchanged.

    Args:
        a: Pose at s = 0
        b: Pose at s = 1
        s: Interpolation parameter in [0, 1]

    Returns:
        Interpolated pose
    """
    if not 0.0 <= s <= 1.0:
        raise InvalidInputError(f"Interpolation parameter must lie in [0, 1], got {s}", field="s", value=s)
    if s == 0.0:
        return a
    if s == 1.0:
        return b

    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a.rotation, b.rotation])))
    translation = (1.0 - s) * a.translation + s * b.translation
    return CameraPose(slerp(s).as_matrix(), translation)


def look_at(eye: np.ndarray, target: np.ndarray, down: Optional[np.ndarray] = None) -> CameraPose:
    """
    World-to-camera pose of a camera at eye looking at target.

    Args:
        eye: Camera center in world coordinates
        target: Point the optical axis passes through
        down: World direction that should map to image +y (default +y)

    Returns:
        CameraPose with +z toward target and +y as close to down as possible
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    down = np.array([0.0, 1.0, 0.0]) if down is None else np.asarray(down, dtype=np.float64)

    forward = target - eye
    forward /= np.linalg.norm(forward)
    y_axis = down - np.dot(down, forward) * forward
    norm = np.linalg.norm(y_axis)
    if norm < 1e-9:
        raise InvalidInputError("Viewing direction is parallel to the down vector", field="down")
    y_axis /= norm
    x_axis = np.cross(y_axis, forward)
    rotation = np.stack([x_axis, y_axis, forward])
    return CameraPose(rotation, -rotation @ eye)


def kabsch_align(src: np.ndarray, dst: np.ndarray) -> CameraPose:
    """
    Least-squares rigid transform (no scale) mapping src onto dst.

    Args:
        src: N x 3 source points
        dst: N x 3 destination points

    Returns:
        CameraPose P with P.apply(src) ~= dst

    Raises:
        DegenerateAlignmentError: Fewer than 3 points, or points collinear/coincident
        InvalidInputError: Shape mismatch
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise InvalidInputError(f"Expected two N x 3 arrays, got {src.shape} and {dst.shape}",
                                field="points")
    n = src.shape[0]
    if n < 3:
        raise DegenerateAlignmentError(n, "at least 3 points are required")

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] < 1e-9 * spread[0]:
        raise DegenerateAlignmentError(n, "points are collinear or coincident")

    u, _, vt = np.linalg.svd(dst_c.T @ src_c)
    d = np.sign(np.linalg.det(u @ vt))
    rotation = u @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ vt
    translation = dst_mean - rotation @ src_mean
    return CameraPose(rotation, translation)


def normalize_trajectory(poses: List[CameraPose]) -> List[CameraPose]:
    """Express a trajectory relative to its first camera (first pose becomes identity)."""
    if not poses:
        return []
    first_inv = inverse(poses[0])
    return [compose(p, first_inv) for p in poses]
