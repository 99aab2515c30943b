"""
Helpers shared by the commands: config resolution (file < flags), output
directories and the resolved-config record written next to outputs.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from app.models.config import RunConfig
from app.services.exceptions import DatasetExistsError, InvalidConfigError
from app.services.scene_io import write_json

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"


def deep_update(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge override into a copy of base."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Raises:
        InvalidConfigError: File missing or not a JSON object
    """
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvalidConfigError(f"Config file {path} does not exist", field="config", value=path) from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"Config file {path} is not valid JSON: {exc}", field="config",
                                 value=path) from exc
    if not isinstance(data, dict):
        raise InvalidConfigError(f"Config file {path} must hold a JSON object", field="config", value=path)
    data.pop("flags", None)
    data.pop("command", None)
    return data


def set_path(target: Dict[str, Any], dotted: str, value: Any) -> None:
    node = target
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def flag_overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, Any]:
    """Collect the flags that were given on the command line as a nested override dict."""
    overrides: Dict[str, Any] = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            set_path(overrides, dotted, list(value) if isinstance(value, tuple) else value)
    return overrides


def resolve_config(
    args: argparse.Namespace,
    mapping: Dict[str, str],
    base: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge base values, the --config file and command-line flags (later wins)
    into a validated RunConfig.

    Raises:
        pydantic.ValidationError: Unknown keys or invalid values
    """
    data = deep_update(base or {}, read_config_file(getattr(args, "config", None)))
    data = deep_update(data, flag_overrides(args, mapping))
    try:
        return RunConfig(**data)
    except ValidationError:
        logger.debug(f"Rejected config: {json.dumps(data, sort_keys=True, default=str)}")
        raise


def write_resolved_config(directory: Path, config: RunConfig, extra: Optional[Dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = config.resolved_dump()
    if extra:
        data["command"] = extra
    path = directory / RESOLVED_CONFIG_NAME
    write_json(path, data)
    return path


def prepare_output(directory: Path, marker: str, force: bool) -> Path:
    """
    Create an output directory, refusing to overwrite an earlier result.

    Raises:
        DatasetExistsError: marker already exists and force is not set
    """
    directory = Path(directory)
    if (directory / marker).exists() and not force:
        raise DatasetExistsError(str(directory))
    directory.mkdir(parents=True, exist_ok=True)
    return directory
