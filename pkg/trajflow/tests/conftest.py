"""
Pytest configuration and fixtures for trajflow tests.

This file contains shared fixtures, assertion helpers and the automatic
unit/integration marking by directory.
"""

from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch

from app.models.config import AblationFlags, FlowConfig, ModelConfig, RunConfig, SceneSpec
from app.services.backbone import VelocityNetwork, build_model
from app.services.conditioning import SceneConditioning, build_conditioning, stack_conditioning
from app.services.geometry import CameraIntrinsics, CameraPose, look_at
from app.services.scenegen import SceneSample, make_scene


def pytest_collection_modifyitems(config, items):
    """Mark tests by the directory they live in."""
    for item in items:
        parts = Path(str(item.fspath)).parts
        if "unit" in parts:
            item.add_marker(pytest.mark.unit)
        elif "integration" in parts:
            item.add_marker(pytest.mark.integration)


# ===== Test Data Fixtures =====

@pytest.fixture
def tiny_scene_spec() -> SceneSpec:
    """Smallest scene the pipeline accepts: 8x8 pixels, 3 frames."""
    return SceneSpec(seed=11, num_points=600, resolution=(8, 8), num_frames=3)


@pytest.fixture
def small_scene_spec() -> SceneSpec:
    """16x16 scene with 5 frames, large enough for pose recovery."""
    return SceneSpec(seed=5, num_points=2048, resolution=(16, 16), num_frames=5)


@pytest.fixture
def tiny_scene(tiny_scene_spec) -> SceneSample:
    return make_scene(tiny_scene_spec)


@pytest.fixture
def small_scene(small_scene_spec) -> SceneSample:
    return make_scene(small_scene_spec)


@pytest.fixture
def tiny_scenes(tiny_scene_spec) -> List[SceneSample]:
    """Three tiny scenes with distinct seeds."""
    return [make_scene(tiny_scene_spec.model_copy(update={"seed": seed})) for seed in (1, 2, 3)]


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics.centered(width=16, height=12, focal=14.0)


@pytest.fixture
def random_poses() -> List[CameraPose]:
    """Twenty cameras around the origin looking at random targets."""
    rng = np.random.default_rng(0)
    poses = []
    for _ in range(20):
        eye = rng.normal(size=3) * 3.0
        target = rng.normal(size=3) * 0.3
        poses.append(look_at(eye, target))
    return poses


# ===== Model Fixtures =====

@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """8x8 frames, 3 frames, one Kalman block after the second of two backbone blocks."""
    return ModelConfig(
        embed_dim=16,
        num_heads=2,
        num_backbone_blocks=2,
        num_kalman_blocks=1,
        num_frames=3,
        image_height=8,
        image_width=8,
    )


@pytest.fixture
def tiny_run_config(tiny_scene_spec) -> RunConfig:
    """Run config for tiny scenes: small model, a few cheap training and sampling steps."""
    return RunConfig(
        scene=tiny_scene_spec,
        model={"embed_dim": 16, "num_heads": 2, "num_backbone_blocks": 2, "num_kalman_blocks": 1},
        flow={"train_steps": 3, "batch_size": 2, "sample_steps": 4, "learning_rate": 1e-3, "save_every": 2},
    )


@pytest.fixture
def tiny_model(tiny_model_config) -> VelocityNetwork:
    return build_model(tiny_model_config, AblationFlags(), seed=0)


@pytest.fixture
def flow_config() -> FlowConfig:
    return FlowConfig()


# ===== Helpers =====

def random_conditioning(config: ModelConfig, batch: int = 2, seed: int = 0,
                        dtype: torch.dtype = torch.float32) -> SceneConditioning:
    """Batched conditioning with random contents and the shapes the model expects."""
    generator = torch.Generator().manual_seed(seed)
    t, c, h, w = config.num_frames, config.latent_channels, config.latent_height, config.latent_width

    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype)

    mask = torch.zeros(batch, t, dtype=dtype)
    mask[:, 0] = 1.0
    mask[:, -1] = 1.0
    z1 = randn(batch, t, c, h, w)
    return SceneConditioning(
        z1=z1,
        z_pc=randn(batch, t, c, h, w),
        confidence=torch.rand(batch, t, 1, h, w, generator=generator, dtype=torch.float64).to(dtype),
        plucker=randn(batch, t, 6, config.image_height, config.image_width),
        endpoint_latents=z1 * mask.view(batch, t, 1, 1, 1),
        endpoint_mask=mask,
    )


def scene_conditioning(scenes: List[SceneSample], patch_size: int = 2,
                       flags: AblationFlags | None = None) -> SceneConditioning:
    return stack_conditioning([build_conditioning(scene, patch_size, flags) for scene in scenes])


def assert_poses_close(a: CameraPose, b: CameraPose, atol: float = 1e-9) -> None:
    np.testing.assert_allclose(a.rotation, b.rotation, atol=atol)
    np.testing.assert_allclose(a.translation, b.translation, atol=atol)


def assert_clouds_equal(a, b) -> None:
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.colors, b.colors)
    np.testing.assert_array_equal(a.confidence, b.confidence)
