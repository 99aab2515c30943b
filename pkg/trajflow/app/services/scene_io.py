"""
On-disk scene format.

One directory per scene:

    meta.json            resolution, frame count, intrinsics, seeds, noise level, scene spec
    poses.json           T row-major 4x4 world-to-camera matrices
    frames/frame_%04d.png  8-bit RGB
    cloud.bin            corrupted (prior) cloud
    clean_cloud.bin      clean cloud used for rendering and pose recovery
    corr.json            correspondences (world point, per-frame pixel and depth)

Cloud files start with a 16-byte header (8-byte magic, little-endian uint64
count) followed by little-endian float32 records x, y, z, r, g, b, conf.
JSON is written with sorted keys and no timestamps so datasets are
byte-reproducible.
"""

import json
import logging
import shutil
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional

import imageio.v2 as imageio
import numpy as np

from app.models.config import SceneSpec
from app.services.exceptions import DatasetCorruptError, DatasetError, MissingFramesError
from app.services.geometry import CameraIntrinsics, CameraPose, ConfidentPointCloud
from app.services.scenegen import SceneSample

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"TFCLOUD1"
CLOUD_HEADER = struct.Struct("<8sQ")
CLOUD_RECORD = np.dtype("<f4")
CLOUD_FIELDS = 7
FRAME_PATTERN = "frame_{:04d}.png"
MANIFEST_NAME = "manifest.json"


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"Missing file {path}", field="path", value=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise DatasetCorruptError(f"Invalid JSON in {path}: {exc}", field="path", value=str(path)) from exc


# ===== Point clouds =====

def write_cloud(path: Path, cloud: ConfidentPointCloud) -> None:
    records = np.concatenate(
        [cloud.positions, cloud.colors, cloud.confidence[:, None]], axis=1
    ).astype(CLOUD_RECORD)
    with open(path, "wb") as f:
        f.write(CLOUD_HEADER.pack(CLOUD_MAGIC, len(cloud)))
        f.write(records.tobytes())


def read_cloud(path: Path) -> ConfidentPointCloud:
    """
    Read a cloud file. Colors are snapped back to the 8-bit grid they were
    generated on, so a written scene reloads bit-identically.
    """
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"Missing cloud file {path}", field="path", value=str(path)) from exc
    if len(raw) < CLOUD_HEADER.size:
        raise DatasetCorruptError(f"Truncated cloud header in {path}", field="path", value=str(path))
    magic, count = CLOUD_HEADER.unpack_from(raw)
    if magic != CLOUD_MAGIC:
        raise DatasetCorruptError(f"Bad cloud magic {magic!r} in {path}", field="path", value=str(path))
    expected = CLOUD_HEADER.size + count * CLOUD_FIELDS * CLOUD_RECORD.itemsize
    if len(raw) != expected:
        raise DatasetCorruptError(
            f"Cloud file {path} has {len(raw)} bytes, expected {expected} for {count} points",
            field="path",
            value=str(path),
        )
    records = np.frombuffer(raw, dtype=CLOUD_RECORD, offset=CLOUD_HEADER.size).reshape(count, CLOUD_FIELDS)
    records = records.astype(np.float64)
    colors = np.round(records[:, 3:6] * 255.0) / 255.0
    return ConfidentPointCloud(records[:, :3], colors, records[:, 6])


# ===== Frames =====

def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(images: np.ndarray) -> np.ndarray:
    """8-bit images to float32 in [0, 1] via k / 255 in double precision."""
    return (np.asarray(images).astype(np.float64) / 255.0).astype(np.float32)


def write_frames(directory: Path, frames: np.ndarray) -> List[Path]:
    """Write T x H x W x 3 frames in [0, 1] as 8-bit PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, image in enumerate(to_uint8(frames)):
        path = directory / FRAME_PATTERN.format(i)
        imageio.imwrite(path, image, format="PNG")
        paths.append(path)
    return paths


def read_frames(directory: Path, num_frames: int) -> np.ndarray:
    """
    Read frames frame_0000.png .. frame_{T-1}.png.

    Raises:
        MissingFramesError: Directory or any frame file is absent
    """
    directory = Path(directory)
    missing = [i for i in range(num_frames) if not (directory / FRAME_PATTERN.format(i)).is_file()]
    if missing:
        raise MissingFramesError(
            f"Missing frames {missing} in {directory}", field="frames", value=str(directory)
        )
    images = []
    for i in range(num_frames):
        image = imageio.imread(directory / FRAME_PATTERN.format(i))
        if image.ndim != 3 or image.shape[-1] < 3:
            raise DatasetCorruptError(f"Frame {i} in {directory} is not RGB", field="frames")
        images.append(image[..., :3])
    return from_uint8(np.stack(images))


# ===== Scenes =====

def save_scene(scene: SceneSample, directory: Path) -> Path:
    """Write a scene in the on-disk format. The directory must not already hold a scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    write_json(directory / "meta.json", {
        "resolution": [spec.height, spec.width],
        "num_frames": scene.num_frames,
        "intrinsics": scene.intrinsics.to_dict(),
        "seed": spec.seed,
        "generation_seed": scene.generation_seed,
        "sigma": spec.depth_noise_sigma,
        "spec": spec.model_dump(mode="json"),
    })
    write_json(directory / "poses.json", [pose.as_matrix().tolist() for pose in scene.poses])
    write_frames(directory / "frames", scene.frames)
    write_cloud(directory / "cloud.bin", scene.noisy_cloud)
    write_cloud(directory / "clean_cloud.bin", scene.clean_cloud)
    write_json(directory / "corr.json", {
        "points": scene.corr_points.tolist(),
        "pixels": scene.corr_pixels.tolist(),
        "depths": scene.corr_depths.tolist(),
    })
    return directory


def load_scene(directory: Path) -> SceneSample:
    """
    Load a scene written by save_scene.

    Raises:
        DatasetError: Directory or a required file is missing
        DatasetCorruptError: A file fails to decode or disagrees with meta.json
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Scene directory {directory} does not exist", field="path", value=str(directory))

    meta = read_json(directory / "meta.json")
    try:
        spec = SceneSpec(**meta["spec"])
        intrinsics = CameraIntrinsics(**meta["intrinsics"])
        poses = [CameraPose.from_matrix(np.array(m, dtype=np.float64)) for m in read_json(directory / "poses.json")]
        corr = read_json(directory / "corr.json")
        generation_seed = int(meta["generation_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetCorruptError(f"Invalid scene metadata in {directory}: {exc}", field="path",
                                  value=str(directory)) from exc

    if len(poses) != spec.num_frames:
        raise DatasetCorruptError(
            f"{directory} has {len(poses)} poses for {spec.num_frames} frames", field="poses"
        )
    m = len(corr["points"])
    return SceneSample(
        spec=spec,
        frames=read_frames(directory / "frames", spec.num_frames),
        poses=poses,
        intrinsics=intrinsics,
        clean_cloud=read_cloud(directory / "clean_cloud.bin"),
        noisy_cloud=read_cloud(directory / "cloud.bin"),
        corr_points=np.array(corr["points"], dtype=np.float64).reshape(m, 3),
        corr_pixels=np.array(corr["pixels"], dtype=np.float64).reshape(m, spec.num_frames, 2),
        corr_depths=np.array(corr["depths"], dtype=np.float64).reshape(m, spec.num_frames),
        generation_seed=generation_seed,
    )


# ===== Dataset manifest =====

def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def manifest_entry(sid: str, scene: SceneSample) -> Dict[str, Any]:
    return {
        "id": sid,
        "seed": scene.spec.seed,
        "generation_seed": scene.generation_seed,
        "sigma": scene.spec.depth_noise_sigma,
        "noiseless": scene.spec.depth_noise_sigma == 0.0,
    }


def write_manifest(root: Path, base_spec: SceneSpec, entries: List[Dict[str, Any]]) -> Path:
    path = Path(root) / MANIFEST_NAME
    write_json(path, {
        "spec": base_spec.model_dump(mode="json"),
        "num_scenes": len(entries),
        "scenes": entries,
    })
    return path


def read_manifest(root: Path) -> Dict[str, Any]:
    """
    Raises:
        DatasetError: No manifest at root
    """
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"No dataset manifest at {path}", field="data", value=str(root))
    return read_json(path)


def dataset_exists(root: Path) -> bool:
    return (Path(root) / MANIFEST_NAME).is_file()


def clear_dataset(root: Path) -> None:
    """Remove a previously written dataset (manifest and scene directories) under root."""
    root = Path(root)
    manifest: Optional[Dict[str, Any]] = read_manifest(root) if dataset_exists(root) else None
    if manifest is not None:
        for entry in manifest.get("scenes", []):
            shutil.rmtree(root / entry["id"], ignore_errors=True)
        (root / MANIFEST_NAME).unlink()
    logger.info(f"Cleared dataset at {root}")
