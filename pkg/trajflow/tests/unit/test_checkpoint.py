"""
Unit tests for safetensors checkpoints and resume compatibility.
"""

import pytest
import torch

from app.services.backbone import build_model
from app.services.checkpoint import (
    check_compatible,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from app.services.conditioning import build_conditioning
from app.services.exceptions import CheckpointMismatchError, DatasetCorruptError, DatasetError
from app.services.flow import FlowTrainer

pytestmark = pytest.mark.models


def _trainer(config, scenes):
    model = build_model(config.model, config.flags, seed=config.flow.seed)
    conds = [build_conditioning(scene, config.model.patch_size, config.flags) for scene in scenes]
    return FlowTrainer(model, conds, config.flow, config.flags)


def test_checkpoint_round_trip(tiny_run_config, tiny_scenes, tmp_path):
    trainer = _trainer(tiny_run_config, tiny_scenes)
    trainer.fit(0, 2)
    path = save_checkpoint(tmp_path / "ckpt" / "step_2.safetensors", trainer.model, tiny_run_config, 2,
                           trainer.optimizer)

    checkpoint = load_checkpoint(path)
    assert checkpoint.step == 2
    assert checkpoint.config == tiny_run_config

    restored = restore_model(checkpoint)
    for name, value in trainer.model.state_dict().items():
        assert torch.equal(restored.state_dict()[name], value), name
    assert not list(path.parent.glob("*.tmp"))


def test_optimizer_moments_are_restored(tiny_run_config, tiny_scenes, tmp_path):
    trainer = _trainer(tiny_run_config, tiny_scenes)
    trainer.fit(0, 2)
    path = save_checkpoint(tmp_path / "ckpt.safetensors", trainer.model, tiny_run_config, 2, trainer.optimizer)

    model = restore_model(load_checkpoint(path))
    optimizer = torch.optim.Adam(model.parameters(), lr=tiny_run_config.flow.learning_rate)
    restore_optimizer(optimizer, model, load_checkpoint(path))

    original = dict(trainer.model.named_parameters())
    for name, param in model.named_parameters():
        expected = trainer.optimizer.state[original[name]]
        actual = optimizer.state[param]
        assert torch.equal(actual["exp_avg"], expected["exp_avg"]), name
        assert torch.equal(actual["exp_avg_sq"], expected["exp_avg_sq"]), name
        assert float(actual["step"]) == 2.0


def test_resumed_training_matches_uninterrupted(tiny_run_config, tiny_scenes, tmp_path):
    straight = _trainer(tiny_run_config, tiny_scenes)
    straight.fit(0, 4)

    first = _trainer(tiny_run_config, tiny_scenes)
    first.fit(0, 2)
    path = save_checkpoint(tmp_path / "ckpt.safetensors", first.model, tiny_run_config, 2, first.optimizer)
    checkpoint = load_checkpoint(path)
    model = restore_model(checkpoint)
    conds = [build_conditioning(scene, 2, tiny_run_config.flags) for scene in tiny_scenes]
    resumed = FlowTrainer(model, conds, tiny_run_config.flow, tiny_run_config.flags)
    restore_optimizer(resumed.optimizer, model, checkpoint)
    resumed.fit(checkpoint.step, 4)

    for name, value in straight.model.state_dict().items():
        torch.testing.assert_close(resumed.model.state_dict()[name], value, rtol=0, atol=1e-6, msg=name)


# ===== Compatibility Tests =====

def test_variant_change_is_rejected(tiny_run_config, tmp_path):
    model = build_model(tiny_run_config.model, tiny_run_config.flags)
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / "c.safetensors", model, tiny_run_config, 0))

    with pytest.raises(CheckpointMismatchError, match="variant"):
        check_compatible(checkpoint, tiny_run_config.model_copy(update={"variant": "c"}))


def test_resume_requires_matching_flow_settings(tiny_run_config, tmp_path):
    model = build_model(tiny_run_config.model, tiny_run_config.flags)
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / "c.safetensors", model, tiny_run_config, 1))
    longer = tiny_run_config.model_copy(
        update={"flow": tiny_run_config.flow.model_copy(update={"train_steps": 10})}
    )
    faster = tiny_run_config.model_copy(
        update={"flow": tiny_run_config.flow.model_copy(update={"learning_rate": 0.1})}
    )

    check_compatible(checkpoint, longer, resume=True)
    check_compatible(checkpoint, faster)
    with pytest.raises(CheckpointMismatchError, match="learning_rate"):
        check_compatible(checkpoint, faster, resume=True)


def test_mismatched_parameters_are_rejected(tiny_run_config, tmp_path):
    model = build_model(tiny_run_config.model, tiny_run_config.flags)
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / "c.safetensors", model, tiny_run_config, 0))
    checkpoint.model_state.pop(next(iter(checkpoint.model_state)))

    with pytest.raises(CheckpointMismatchError):
        restore_model(checkpoint)


# ===== File Errors =====

def test_missing_checkpoint(tmp_path):
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "none.safetensors")


def test_garbage_checkpoint(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(b"\x00" * 64)

    with pytest.raises(DatasetCorruptError):
        load_checkpoint(path)
