"""
Unit tests for turning scenes into conditioning tensors.
"""

import pytest
import torch

from app.models.config import AblationFlags
from app.services.conditioning import (
    build_conditioning,
    endpoint_mask,
    select,
    stack_conditioning,
)
from app.services.exceptions import InvalidInputError
from app.services.latent_codec import encode
from app.services.scenegen import make_scene

pytestmark = pytest.mark.backbone


def test_endpoint_mask_variants():
    assert endpoint_mask(5).tolist() == [1.0, 0.0, 0.0, 0.0, 1.0]
    assert endpoint_mask(5, last_frame=False).tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_conditioning_shapes(tiny_scene):
    cond = build_conditioning(tiny_scene, patch_size=2)

    assert cond.z1.shape == (3, 12, 4, 4)
    assert cond.z_pc.shape == (3, 12, 4, 4)
    assert cond.confidence.shape == (3, 1, 4, 4)
    assert cond.plucker.shape == (3, 6, 8, 8)
    assert cond.endpoint_mask.shape == (3,)
    assert not cond.is_batched


def test_target_latent_encodes_frames(tiny_scene):
    cond = build_conditioning(tiny_scene, patch_size=2)

    assert torch.equal(cond.z1, encode(tiny_scene.frames, 2).data)


def test_endpoint_latents_only_on_conditioned_frames(tiny_scene):
    cond = build_conditioning(tiny_scene, patch_size=2)

    assert torch.equal(cond.endpoint_latents[0], cond.z1[0])
    assert torch.equal(cond.endpoint_latents[-1], cond.z1[-1])
    assert torch.all(cond.endpoint_latents[1] == 0)


def test_first_frame_only_conditioning(tiny_scene):
    cond = build_conditioning(tiny_scene, 2, AblationFlags(last_frame_conditioning=False))

    assert cond.endpoint_mask.tolist() == [1.0, 0.0, 0.0]
    assert torch.all(cond.endpoint_latents[-1] == 0)


def test_confidence_lies_in_unit_interval(tiny_scene):
    cond = build_conditioning(tiny_scene, patch_size=2)

    assert float(cond.confidence.min()) >= 0.0
    assert float(cond.confidence.max()) <= 1.0
    assert float(cond.confidence.max()) > 0.0


def test_confidence_replaced_by_ones_when_ablated(tiny_scene):
    cond = build_conditioning(tiny_scene, 2, AblationFlags(use_confidence=False))

    assert torch.all(cond.confidence == 1.0)


def test_noiseless_prior_equals_target(tiny_scene_spec):
    """With sigma 0 the projected prior is the clean render, i.e. the frames themselves."""
    scene = make_scene(tiny_scene_spec.model_copy(update={"depth_noise_sigma": 0.0}))
    cond = build_conditioning(scene, patch_size=2)

    assert torch.equal(cond.z_pc, cond.z1)


def test_stack_and_select(tiny_scenes):
    conds = [build_conditioning(scene, 2) for scene in tiny_scenes]
    batch = stack_conditioning(conds)

    assert batch.is_batched
    assert batch.z1.shape == (3, 3, 12, 4, 4)
    picked = select(batch, torch.tensor([2, 0]))
    assert torch.equal(picked.z1[0], conds[2].z1)
    assert torch.equal(picked.plucker[1], conds[0].plucker)


def test_stack_rejects_empty_list():
    with pytest.raises(InvalidInputError):
        stack_conditioning([])


def test_to_dtype(tiny_scene):
    cond = build_conditioning(tiny_scene, 2).to(torch.float64)

    assert cond.z1.dtype == torch.float64
    assert cond.endpoint_mask.dtype == torch.float64
