"""
Checkpoint archive: model parameters, Adam moments and the resolved run config
in a single safetensors file.

Tensors are stored as named little-endian 32-bit arrays ("model/<param>",
"optim/<param>/<state>"); the header metadata carries the RunConfig (with its
ablation flags), the training step and a format tag.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import torch
import torch.nn as nn
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from app.models.config import RunConfig
from app.services.backbone import VelocityNetwork, build_model
from app.services.exceptions import CheckpointMismatchError, DatasetCorruptError, DatasetError

logger = logging.getLogger(__name__)

FORMAT_TAG = "trajflow-checkpoint"
FORMAT_VERSION = "1"
MODEL_PREFIX = "model/"
OPTIM_PREFIX = "optim/"
ADAM_STATE_KEYS = ("step", "exp_avg", "exp_avg_sq")
RESUME_FLOW_FIELDS = ("lambda1", "lambda2", "lambda_grad", "renormalize_init", "learning_rate", "batch_size", "seed")


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Dict[str, torch.Tensor]]


def run_config_from_dump(data: dict) -> RunConfig:
    """Rebuild a RunConfig from resolved_dump() output (the derived flags are dropped)."""
    data = dict(data)
    data.pop("flags", None)
    return RunConfig(**data)


def save_checkpoint(
    path: Path,
    model: nn.Module,
    config: RunConfig,
    step: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename), so an
    interrupted write never replaces the previous good checkpoint.

    Args:
        path: Target .safetensors path
        model: Model whose parameters are stored
        config: Run configuration
        step: Number of completed training steps
        optimizer: Optional Adam optimizer whose moments are stored

    Returns:
        Path of the written checkpoint
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors: Dict[str, torch.Tensor] = {
        MODEL_PREFIX + name: value.detach().to(torch.float32).contiguous()
        for name, value in model.state_dict().items()
    }
    if optimizer is not None:
        for name, param in model.named_parameters():
            state = optimizer.state.get(param, {})
            for key in ADAM_STATE_KEYS:
                if key in state:
                    value = torch.as_tensor(state[key])
                    tensors[f"{OPTIM_PREFIX}{name}/{key}"] = value.detach().to(torch.float32).contiguous()

    metadata = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "step": str(step),
        "config": json.dumps(config.resolved_dump(), sort_keys=True),
    }
    tmp_path = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp_path), metadata=metadata)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint at step {step} to {path}", extra={"step": step})
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint.

    Raises:
        DatasetError: File does not exist
        DatasetCorruptError: File is not a trajflow checkpoint
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Checkpoint {path} does not exist", field="checkpoint", value=str(path))
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {key: f.get_tensor(key) for key in f.keys()}
    except (SafetensorError, OSError) as exc:
        raise DatasetCorruptError(f"Cannot read checkpoint {path}: {exc}", field="checkpoint",
                                  value=str(path)) from exc

    if metadata.get("format") != FORMAT_TAG:
        raise DatasetCorruptError(f"{path} is not a trajflow checkpoint", field="checkpoint", value=str(path))

    model_state = {k[len(MODEL_PREFIX):]: v for k, v in tensors.items() if k.startswith(MODEL_PREFIX)}
    optimizer_state: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        if key.startswith(OPTIM_PREFIX):
            name, state_key = key[len(OPTIM_PREFIX):].rsplit("/", 1)
            optimizer_state.setdefault(name, {})[state_key] = value

    return Checkpoint(
        config=run_config_from_dump(json.loads(metadata["config"])),
        step=int(metadata["step"]),
        model_state=model_state,
        optimizer_state=optimizer_state,
    )


def restore_model(checkpoint: Checkpoint) -> VelocityNetwork:
    """Build the network described by the checkpoint and load its parameters."""
    config = checkpoint.config
    model = build_model(config.model, config.flags)
    try:
        model.load_state_dict(checkpoint.model_state, strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatchError(
            f"Checkpoint parameters do not match its configuration: {exc}", field="checkpoint"
        ) from exc
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, checkpoint: Checkpoint) -> None:
    """Load stored Adam moments into an optimizer built over model.parameters()."""
    for name, param in model.named_parameters():
        state = checkpoint.optimizer_state.get(name)
        if not state:
            continue
        optimizer.state[param] = {
            "step": state["step"].clone(),
            "exp_avg": state["exp_avg"].clone().to(param.dtype),
            "exp_avg_sq": state["exp_avg_sq"].clone().to(param.dtype),
        }


def check_compatible(checkpoint: Checkpoint, config: RunConfig, resume: bool = False) -> None:
    """
    Raises:
        CheckpointMismatchError: Model shape or variant differs from the run config,
            or (when resuming) a flow setting that shapes the training trajectory differs
    """
    stored = checkpoint.config
    if resume:
        changed = [
            name for name in RESUME_FLOW_FIELDS
            if getattr(stored.flow, name) != getattr(config.flow, name)
        ]
        if changed:
            raise CheckpointMismatchError(
                f"Cannot resume: flow settings {changed} differ from the checkpoint", field="checkpoint"
            )
    if stored.model != config.model or stored.variant != config.variant:
        raise CheckpointMismatchError(
            f"Checkpoint was trained with variant '{stored.variant}' and model "
            f"{stored.model.model_dump()}; run requests variant '{config.variant}' and "
            f"{config.model.model_dump()}",
            field="checkpoint",
        )
