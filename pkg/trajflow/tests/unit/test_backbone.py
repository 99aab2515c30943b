"""
Unit tests for the velocity network and its Kalman DiT blocks.
"""

import dataclasses

import pytest
import torch
import torch.nn as nn

from app.models.config import VARIANT_FLAGS, AblationFlags, ModelConfig
from app.services.backbone import (
    Attention,
    DiTBlock,
    KalmanBlockState,
    KalmanDiTBlock,
    TimestepEmbedder,
    VelocityNetwork,
    build_model,
    count_parameters,
    zero_init_parameter_names,
)
from app.services.exceptions import InvalidInputError, NonFiniteInputError
from tests.conftest import random_conditioning

pytestmark = pytest.mark.backbone


def _randomize_backbone_zero_layers(model: nn.Module, seed: int = 0) -> None:
    """Give the backbone's zero-initialized layers random weights; Kalman blocks stay fresh."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in model.named_modules():
            if getattr(module, "is_zero_init", False) and not name.startswith("kalman_blocks"):
                module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * 0.1)
                module.bias.copy_(torch.randn(module.bias.shape, generator=generator) * 0.1)


def _inputs(config: ModelConfig, seed: int, batch: int = 2):
    generator = torch.Generator().manual_seed(seed + 1000)
    cond = random_conditioning(config, batch=batch, seed=seed)
    z_t = torch.randn(cond.z1.shape, generator=generator)
    t = torch.rand(batch, generator=generator)
    return z_t, t, cond


# ===== Forward Tests =====

def test_forward_output_shape(tiny_model, tiny_model_config):
    z_t, t, cond = _inputs(tiny_model_config, seed=0)
    v = tiny_model(z_t, t, cond)

    assert v.shape == z_t.shape


def test_fresh_model_predicts_zero_velocity(tiny_model, tiny_model_config):
    z_t, t, cond = _inputs(tiny_model_config, seed=0)

    assert torch.all(tiny_model(z_t, t, cond) == 0)


@pytest.mark.parametrize("variant", ["full", "c", "f", "g", "h"])
def test_fresh_kalman_blocks_are_transparent(variant):
    """Forward with fresh Kalman blocks equals the Kalman-free backbone on 20 random inputs."""
    flags = VARIANT_FLAGS[variant]
    base = dict(embed_dim=16, num_heads=2, num_backbone_blocks=3, num_frames=3, image_height=8, image_width=8)
    with_kalman = build_model(ModelConfig(num_kalman_blocks=2, **base), flags, seed=4)
    _randomize_backbone_zero_layers(with_kalman)
    without = VelocityNetwork(ModelConfig(num_kalman_blocks=0, **base), flags)
    result = without.load_state_dict(with_kalman.state_dict(), strict=False)
    assert not result.missing_keys

    with torch.no_grad():
        for seed in range(20):
            z_t, t, cond = _inputs(with_kalman.config, seed)
            diff = (with_kalman(z_t, t, cond) - without(z_t, t, cond)).abs().max().item()
            assert diff < 1e-6


def test_trained_kalman_branch_changes_output(tiny_model_config):
    model = build_model(tiny_model_config, seed=1)
    _randomize_backbone_zero_layers(model)
    z_t, t, cond = _inputs(tiny_model_config, seed=3)
    with torch.no_grad():
        before = model(z_t, t, cond)
        nn.init.normal_(model.kalman_blocks[0].predict_out.weight, std=0.1)
        after = model(z_t, t, cond)

    assert not torch.allclose(before, after)


def test_kalman_block_is_identity_at_init(tiny_model_config):
    block = KalmanDiTBlock(tiny_model_config, AblationFlags())
    generator = torch.Generator().manual_seed(0)
    z, z_pc, cam = (torch.randn(2, 12, 16, generator=generator) for _ in range(3))
    c = torch.randn(2, 16, generator=generator)
    state = block(KalmanBlockState(z=z, z_pc=z_pc, cam=cam), c)

    assert torch.equal(state.z, z)
    assert torch.equal(state.z_pc, z_pc)
    assert torch.equal(state.cam, cam)


def test_kalman_update_corrects_towards_prior_difference(tiny_model_config):
    block = KalmanDiTBlock(tiny_model_config, AblationFlags())
    with torch.no_grad():
        block.update_out.weight.copy_(torch.eye(16))
    z_pred = torch.ones(1, 4, 16)
    z_pc = torch.zeros(1, 4, 16)

    # the diff block is the identity at init, so the update adds z_pred - z_pc
    out = block.kalman_update(z_pred, z_pc, torch.zeros(1, 16))
    torch.testing.assert_close(out, 2 * z_pred)


def test_kalman_state_rejects_mismatched_streams():
    with pytest.raises(InvalidInputError):
        KalmanBlockState(z=torch.zeros(1, 4, 8), z_pc=torch.zeros(1, 5, 8), cam=torch.zeros(1, 4, 8))


def test_last_kalman_block_does_not_step_prior(tiny_model_config):
    config = tiny_model_config.model_copy(update={"num_kalman_blocks": 2, "kalman_insertion_indices": [1, 2]})
    model = VelocityNetwork(config)

    assert model.kalman_blocks[0].prior_step is not None
    assert model.kalman_blocks[1].prior_step is None


def test_default_insertion_indices_are_uniform():
    config = ModelConfig(num_backbone_blocks=6, num_kalman_blocks=2)

    assert config.kalman_insertion_indices == [3, 6]
    assert ModelConfig(num_backbone_blocks=10, num_kalman_blocks=3).kalman_insertion_indices == [3, 6, 10]


def test_projection_queries_variant_runs(tiny_model_config):
    config = tiny_model_config.model_copy(update={"control_query_source": "projection"})
    model = build_model(config, seed=0)
    z_t, t, cond = _inputs(config, seed=0)

    assert model(z_t, t, cond).shape == z_t.shape


# ===== Ablation Structure Tests =====

def _has_param(model: nn.Module, fragment: str) -> bool:
    return any(fragment in name for name, _ in model.named_parameters())


def test_update_submodule_removed_when_ablated(tiny_model_config):
    full = VelocityNetwork(tiny_model_config, VARIANT_FLAGS["full"])
    no_update = VelocityNetwork(tiny_model_config, VARIANT_FLAGS["c"])

    assert _has_param(full, "update_out") and _has_param(full, "diff_blocks")
    assert not _has_param(no_update, "update_out")
    assert not _has_param(no_update, "diff_blocks")
    assert count_parameters(no_update) < count_parameters(full)


def test_control_modes_build_their_own_modules(tiny_model_config):
    cross = VelocityNetwork(tiny_model_config, VARIANT_FLAGS["full"]).kalman_blocks[0]
    camera_only = VelocityNetwork(tiny_model_config, VARIANT_FLAGS["f"]).kalman_blocks[0]
    additive = VelocityNetwork(tiny_model_config, VARIANT_FLAGS["g"]).kalman_blocks[0]

    assert hasattr(cross, "context_norm")
    assert isinstance(camera_only.control_attn, Attention)
    assert not hasattr(camera_only, "context_norm")
    assert not hasattr(additive, "control_attn")


def test_camera_only_control_ignores_prior(tiny_model_config):
    block = KalmanDiTBlock(tiny_model_config, VARIANT_FLAGS["f"])
    generator = torch.Generator().manual_seed(0)
    cam = torch.randn(1, 12, 16, generator=generator)
    a = block.control_input(torch.randn(1, 12, 16, generator=generator), cam)
    b = block.control_input(torch.randn(1, 12, 16, generator=generator), cam)

    assert torch.equal(a, b)


def test_additive_control_sums_streams(tiny_model_config):
    block = KalmanDiTBlock(tiny_model_config, VARIANT_FLAGS["g"])
    cam, z_pc = torch.ones(1, 3, 16), torch.full((1, 3, 16), 2.0)

    assert torch.equal(block.control_input(z_pc, cam), torch.full((1, 3, 16), 3.0))


def test_zero_init_layers_are_zero(tiny_model):
    names = zero_init_parameter_names(tiny_model)
    params = dict(tiny_model.named_parameters())

    assert "final_layer.linear.weight" in names
    assert "kalman_blocks.0.predict_out.weight" in names
    assert "kalman_blocks.0.update_out.weight" in names
    for name in names:
        assert torch.all(params[name] == 0)


def test_build_model_is_deterministic(tiny_model_config):
    a = build_model(tiny_model_config, seed=9)
    b = build_model(tiny_model_config, seed=9)
    c = build_model(tiny_model_config, seed=10)

    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.pos_embed.frame, c.pos_embed.frame)


def test_build_model_leaves_global_rng_alone(tiny_model_config):
    torch.manual_seed(123)
    expected = torch.rand(4)

    torch.manual_seed(123)
    build_model(tiny_model_config, seed=5)

    assert torch.equal(torch.rand(4), expected)


def test_build_model_ignores_global_seed(tiny_model_config):
    torch.manual_seed(1)
    a = build_model(tiny_model_config, seed=5)
    torch.manual_seed(2)
    b = build_model(tiny_model_config, seed=5)

    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name


# ===== DiT Block Tests =====

def _block_inputs(tokens: int = 6, dim: int = 16, dtype: torch.dtype = torch.float32):
    generator = torch.Generator().manual_seed(0)
    x = torch.randn(2, tokens, dim, generator=generator, dtype=dtype)
    c = torch.randn(2, dim, generator=generator, dtype=dtype)
    return x, c


def test_fresh_dit_block_is_identity():
    block = DiTBlock(16, 2)
    x, c = _block_inputs()

    assert torch.equal(block(x, c), x)


def test_dit_block_is_permutation_equivariant():
    block = DiTBlock(16, 2)
    _randomize_backbone_zero_layers(block, seed=1)
    x, c = _block_inputs()
    perm = torch.randperm(x.shape[1], generator=torch.Generator().manual_seed(2))

    with torch.no_grad():
        torch.testing.assert_close(block(x[:, perm], c), block(x, c)[:, perm])


def test_fresh_dit_block_has_identity_jacobian():
    """Central finite differences of a fresh block match the identity map."""
    block = DiTBlock(8, 2).double()
    x, c = _block_inputs(tokens=3, dim=8, dtype=torch.float64)
    x, c = x[:1], c[:1]
    eps = 1e-6

    with torch.no_grad():
        columns = []
        for i in range(x.numel()):
            step = torch.zeros(x.numel(), dtype=torch.float64)
            step[i] = eps
            step = step.view_as(x)
            columns.append(((block(x + step, c) - block(x - step, c)) / (2 * eps)).flatten())
    jacobian = torch.stack(columns, dim=1)

    torch.testing.assert_close(jacobian, torch.eye(x.numel(), dtype=torch.float64), atol=1e-5, rtol=0.0)
    autograd = torch.autograd.functional.jacobian(lambda inp: block(inp, c), x).reshape(x.numel(), x.numel())
    torch.testing.assert_close(autograd, torch.eye(x.numel(), dtype=torch.float64), atol=1e-5, rtol=0.0)


# ===== Conditioning Embedding Tests =====

def test_zero_plucker_gives_bias_camera_tokens(tiny_model, tiny_model_config):
    _, _, cond = _inputs(tiny_model_config, seed=0)
    cond = dataclasses.replace(cond, plucker=torch.zeros_like(cond.plucker))

    with torch.no_grad():
        cam = tiny_model.embed_conditioning(cond).cam

    bias = tiny_model.cam_embedder.proj.bias
    assert torch.equal(cam, bias.expand_as(cam))


# ===== Attention and Embedding Tests =====

def test_self_attention_is_permutation_equivariant():
    torch.manual_seed(0)
    attn = Attention(16, 4)
    x = torch.randn(2, 10, 16)
    perm = torch.randperm(10)

    torch.testing.assert_close(attn(x[:, perm]), attn(x)[:, perm])


def test_timestep_embedding_follows_input_dtype():
    t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    emb = TimestepEmbedder.timestep_embedding(t, 64)

    assert emb.dtype == torch.float64
    assert emb.shape == (3, 64)
    assert torch.equal(emb[0, :32], torch.ones(32, dtype=torch.float64))


# ===== Input Validation Tests =====

def test_rejects_non_finite_latent(tiny_model, tiny_model_config):
    z_t, t, cond = _inputs(tiny_model_config, seed=0)
    z_t[0, 0, 0, 0, 0] = float("nan")

    with pytest.raises(NonFiniteInputError):
        tiny_model(z_t, t, cond)


def test_rejects_time_outside_unit_interval(tiny_model, tiny_model_config):
    z_t, t, cond = _inputs(tiny_model_config, seed=0)

    with pytest.raises(InvalidInputError):
        tiny_model(z_t, t + 1.5, cond)


def test_rejects_latent_shape_mismatch(tiny_model, tiny_model_config):
    z_t, t, cond = _inputs(tiny_model_config, seed=0)

    with pytest.raises(InvalidInputError):
        tiny_model(z_t[:, :2], t, cond)


def test_rejects_conditioning_of_other_resolution(tiny_model, tiny_model_config):
    other = tiny_model_config.model_copy(update={"image_height": 16, "image_width": 16})
    z_t, t, cond = _inputs(other, seed=0)

    with pytest.raises(InvalidInputError):
        tiny_model(z_t, t, cond)


def test_rejects_unbatched_conditioning(tiny_model, tiny_model_config):
    _, _, cond = _inputs(tiny_model_config, seed=0, batch=1)
    unbatched = type(cond)(**{name: getattr(cond, name)[0] for name in cond.__dataclass_fields__})

    with pytest.raises(InvalidInputError):
        tiny_model.embed_conditioning(unbatched)
