"""
Unit tests for synthetic scene generation.
"""

import numpy as np
import pytest

from app.models.config import SceneSpec
from app.services.exceptions import InvalidInputError, SceneGenerationError
from app.services.geometry import frustum_mask, project_point_cloud
from app.services.scenegen import (
    MIN_CORRESPONDENCES,
    corrupt_cloud,
    derive_seed,
    make_scene,
    perturbation_confidence,
    render_frames,
    with_noise,
)
from tests.conftest import assert_clouds_equal

pytestmark = pytest.mark.scenegen


# ===== Seeding Tests =====

def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(7, "scene", 0) == derive_seed(7, "scene", 0)
    assert derive_seed(7, "scene", 0) != derive_seed(7, "scene", 1)
    assert derive_seed(7, "scene", 0) != derive_seed(8, "scene", 0)
    assert 0 <= derive_seed(2**64 - 1, "x") < 2**64


# ===== Generation Tests =====

def test_make_scene_is_deterministic(tiny_scene_spec):
    a = make_scene(tiny_scene_spec)
    b = make_scene(tiny_scene_spec)

    np.testing.assert_array_equal(a.frames, b.frames)
    assert_clouds_equal(a.clean_cloud, b.clean_cloud)
    assert_clouds_equal(a.noisy_cloud, b.noisy_cloud)
    for pa, pb in zip(a.poses, b.poses):
        np.testing.assert_array_equal(pa.as_matrix(), pb.as_matrix())
    np.testing.assert_array_equal(a.corr_pixels, b.corr_pixels)
    assert a.generation_seed == b.generation_seed


def test_different_seeds_give_different_scenes(tiny_scene_spec):
    a = make_scene(tiny_scene_spec)
    b = make_scene(tiny_scene_spec.model_copy(update={"seed": tiny_scene_spec.seed + 1}))

    assert not np.array_equal(a.clean_cloud.positions, b.clean_cloud.positions)


def test_scene_shapes(small_scene, small_scene_spec):
    t = small_scene_spec.num_frames
    h, w = small_scene_spec.resolution

    assert small_scene.frames.shape == (t, h, w, 3)
    assert small_scene.frames.dtype == np.float32
    assert len(small_scene.poses) == t
    assert len(small_scene.clean_cloud) == small_scene_spec.num_points
    assert len(small_scene.noisy_cloud) == small_scene_spec.num_points
    assert small_scene.endpoint_indices == (0, t - 1)
    assert float(small_scene.frames.min()) >= 0.0 and float(small_scene.frames.max()) <= 1.0


def test_frames_are_renders_of_the_clean_cloud(small_scene):
    rendered = render_frames(small_scene.clean_cloud, small_scene.poses, small_scene.intrinsics)

    np.testing.assert_array_equal(rendered, small_scene.frames)


def test_frames_use_8_bit_colors(small_scene):
    """Colors sit on the 8-bit grid so PNG storage is lossless."""
    codes = small_scene.frames.astype(np.float64) * 255.0
    np.testing.assert_allclose(codes, np.round(codes), atol=1e-4)


def test_correspondences_stay_in_every_frustum(small_scene):
    m = small_scene.corr_points.shape[0]
    assert m >= MIN_CORRESPONDENCES
    assert small_scene.corr_pixels.shape == (m, small_scene.num_frames, 2)
    for i, pose in enumerate(small_scene.poses):
        cam = pose.apply(small_scene.corr_points)
        np.testing.assert_allclose(cam[:, 2], small_scene.corr_depths[:, i])
        assert np.all(small_scene.corr_depths[:, i] > 0)
        u, v = small_scene.corr_pixels[:, i, 0], small_scene.corr_pixels[:, i, 1]
        assert np.all((u >= 0) & (u < small_scene.intrinsics.width))
        assert np.all((v >= 0) & (v < small_scene.intrinsics.height))


def test_majority_of_points_stay_in_frustum(small_scene):
    in_all = np.ones(len(small_scene.clean_cloud), dtype=bool)
    for pose in small_scene.poses:
        in_all &= frustum_mask(small_scene.clean_cloud, pose, small_scene.intrinsics)

    assert in_all.mean() >= 0.5


def test_camera_looks_at_scene(small_scene):
    coverage = [
        project_point_cloud(small_scene.clean_cloud, pose, small_scene.intrinsics).mask.mean()
        for pose in small_scene.poses
    ]
    assert min(coverage) > 0.05


def test_generation_fails_when_cameras_sit_inside_the_scene():
    spec = SceneSpec(seed=1, num_points=200, resolution=(8, 8), num_frames=3,
                     camera_distance=0.6, trajectory_spread=3.0)
    with pytest.raises(SceneGenerationError):
        make_scene(spec)


# ===== Corruption Tests =====

def test_sigma_zero_gives_noiseless_prior(tiny_scene_spec):
    scene = make_scene(tiny_scene_spec.model_copy(update={"depth_noise_sigma": 0.0}))

    np.testing.assert_array_equal(scene.noisy_cloud.positions, scene.clean_cloud.positions)
    np.testing.assert_array_equal(scene.noisy_cloud.confidence, np.ones(len(scene.clean_cloud)))


def test_perturbation_moves_points_along_rays(small_scene):
    origin = small_scene.poses[0].center
    clean = small_scene.clean_cloud.positions - origin
    noisy = small_scene.noisy_cloud.positions - origin
    cross = np.linalg.norm(np.cross(clean, noisy), axis=1) / np.linalg.norm(clean, axis=1)

    assert np.max(cross) < 1e-5


def test_confidence_reflects_perturbation(small_scene):
    """Confidence equals exp(-sharpness |delta| / sigma) up to 32-bit storage."""
    spec = small_scene.spec
    delta = np.linalg.norm(small_scene.noisy_cloud.positions - small_scene.clean_cloud.positions, axis=1)
    expected = np.exp(-spec.conf_sharpness * delta / spec.depth_noise_sigma)

    np.testing.assert_allclose(small_scene.noisy_cloud.confidence, expected, atol=1e-4)
    assert np.corrcoef(delta, small_scene.noisy_cloud.confidence)[0, 1] < -0.5


def test_perturbation_confidence_edge_cases():
    assert perturbation_confidence(np.array([0.0]), 0.1, 1.0)[0] == 1.0
    np.testing.assert_array_equal(perturbation_confidence(np.array([0.3, 2.0]), 0.0, 1.0), [1.0, 1.0])


def test_corrupt_cloud_rejects_negative_sigma(tiny_scene):
    with pytest.raises(InvalidInputError):
        corrupt_cloud(tiny_scene.clean_cloud, -0.1, 1.0, seed=0)


def test_with_noise_at_original_sigma_reproduces_prior(tiny_scene):
    again = with_noise(tiny_scene, tiny_scene.spec.depth_noise_sigma)

    assert_clouds_equal(again.noisy_cloud, tiny_scene.noisy_cloud)
    np.testing.assert_array_equal(again.frames, tiny_scene.frames)


def test_with_noise_scales_offsets(small_scene):
    """The sweep reuses the perturbation stream, so offsets grow with sigma."""
    sigma = small_scene.spec.depth_noise_sigma
    louder = with_noise(small_scene, 3 * sigma)
    base = np.linalg.norm(small_scene.noisy_cloud.positions - small_scene.clean_cloud.positions, axis=1)
    scaled = np.linalg.norm(louder.noisy_cloud.positions - small_scene.clean_cloud.positions, axis=1)

    np.testing.assert_allclose(scaled, 3 * base, atol=1e-5)
    assert louder.spec.depth_noise_sigma == 3 * sigma
    assert_clouds_equal(louder.clean_cloud, small_scene.clean_cloud)


def test_with_noise_zero_restores_clean_geometry(small_scene):
    silent = with_noise(small_scene, 0.0)

    np.testing.assert_array_equal(silent.noisy_cloud.positions, small_scene.clean_cloud.positions)
    assert silent.spec.depth_noise_sigma == 0.0
