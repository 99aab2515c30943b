"""
Turn a SceneSample into the tensors consumed by the velocity network and the
flow objective: target latent, projected-prior latent, frame-wise confidence,
Plücker images and endpoint conditioning.
"""

import dataclasses
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from app.models.config import AblationFlags
from app.services.exceptions import InvalidInputError
from app.services.geometry import plucker_embedding, project_point_cloud
from app.services.latent_codec import encode, resize_tensor
from app.services.scenegen import SceneSample


@dataclass(frozen=True)
class SceneConditioning:
    """
    Per-scene conditioning tensors. Shapes are given unbatched; stacked
    batches carry an extra leading dimension.
    """

    z1: torch.Tensor                # T x C x H' x W' target latent
    z_pc: torch.Tensor              # T x C x H' x W' projected-prior latent
    confidence: torch.Tensor        # T x 1 x H' x W' frame-wise confidence
    plucker: torch.Tensor           # T x 6 x H x W
    endpoint_latents: torch.Tensor  # T x C x H' x W', zero on unconditioned frames
    endpoint_mask: torch.Tensor     # T, 1 on conditioned frames

    def to(self, dtype: torch.dtype) -> "SceneConditioning":
        return SceneConditioning(**{
            f.name: getattr(self, f.name).to(dtype) for f in dataclasses.fields(self)
        })

    @property
    def is_batched(self) -> bool:
        return self.z1.ndim == 5


def endpoint_mask(num_frames: int, last_frame: bool = True) -> torch.Tensor:
    """Indicator of conditioned frames: {0, T-1}, or {0} for first-frame-only conditioning."""
    mask = torch.zeros(num_frames)
    mask[0] = 1.0
    if last_frame:
        mask[-1] = 1.0
    return mask


def build_conditioning(
    scene: SceneSample, patch_size: int, flags: AblationFlags | None = None
) -> SceneConditioning:
    """
    Build the conditioning tensors of one scene.

    The noisy cloud is projected into every target camera; its rgb is encoded
    into the prior latent and its confidence plane is resized onto the latent
    grid. With use_confidence off the plane is replaced by ones.

    Args:
        scene: Scene sample
        patch_size: Codec patch size p
        flags: Ablation flags (defaults to the full model)

    Returns:
        SceneConditioning in float32
    """
    flags = flags or AblationFlags()
    t_count = scene.num_frames
    height, width = scene.frames.shape[1:3]
    if height % patch_size or width % patch_size:
        raise InvalidInputError(
            f"Frame size {height}x{width} not divisible by patch size {patch_size}",
            field="patch_size",
        )

    projections = [project_point_cloud(scene.noisy_cloud, pose, scene.intrinsics) for pose in scene.poses]
    prior_rgb = np.stack([p.rgb for p in projections]).astype(np.float32)
    conf_planes = np.stack([p.conf for p in projections]).astype(np.float32)

    z1 = encode(scene.frames, patch_size).data
    z_pc = encode(prior_rgb, patch_size).data
    _, _, h_lat, w_lat = z1.shape

    if flags.use_confidence:
        confidence = resize_tensor(torch.from_numpy(conf_planes)[:, None], t_count, h_lat, w_lat)
    else:
        confidence = torch.ones(t_count, 1, h_lat, w_lat)

    plucker = torch.from_numpy(
        np.stack([plucker_embedding(pose, scene.intrinsics).as_channels() for pose in scene.poses])
    ).float()

    mask = endpoint_mask(t_count, flags.last_frame_conditioning)
    endpoint_latents = z1 * mask.view(-1, 1, 1, 1)

    return SceneConditioning(
        z1=z1,
        z_pc=z_pc,
        confidence=confidence,
        plucker=plucker,
        endpoint_latents=endpoint_latents,
        endpoint_mask=mask,
    )


def stack_conditioning(items: List[SceneConditioning]) -> SceneConditioning:
    """Stack unbatched conditionings along a new leading batch dimension."""
    if not items:
        raise InvalidInputError("Cannot stack an empty list of conditionings", field="batch")
    return SceneConditioning(**{
        f.name: torch.stack([getattr(item, f.name) for item in items])
        for f in dataclasses.fields(SceneConditioning)
    })


def select(cond: SceneConditioning, indices: torch.Tensor) -> SceneConditioning:
    """Gather a sub-batch of a batched conditioning."""
    return SceneConditioning(**{
        f.name: getattr(cond, f.name).index_select(0, indices)
        for f in dataclasses.fields(SceneConditioning)
    })
