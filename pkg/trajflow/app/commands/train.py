"""
train: fit the velocity network of one variant on a dataset, with periodic
checkpoints, a per-step JSON log and bit-compatible resumption.
"""

import argparse
import json
import logging
from pathlib import Path

from app.commands.common import prepare_output, resolve_config, write_resolved_config
from app.config.settings import settings
from app.models.errors import EXIT_OK
from app.models.report import TrainLogRecord
from app.services.checkpoint import (
    check_compatible,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from app.services.exceptions import NumericalFailureError
from app.services.flow import StepResult
from app.services.pipeline import load_dataset, make_trainer
from app.services.scene_io import read_manifest

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.safetensors"
TRAIN_LOG_NAME = "train_log.jsonl"

FLAG_MAPPING = {
    "seed": "flow.seed",
    "variant": "variant",
    "steps": "flow.train_steps",
    "lr": "flow.learning_rate",
    "batch_size": "flow.batch_size",
    "save_every": "flow.save_every",
    "lambda_grad": "flow.lambda_grad",
    "renormalize_init": "flow.renormalize_init",
}


def add_parser(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("train", parents=parents, help="Train a variant on a dataset")
    parser.add_argument("--data", help="Dataset directory (default: settings data_dir)")
    parser.add_argument("--variant", help="Ablation variant tag (full, a-h)")
    parser.add_argument("--steps", type=int, help="Total number of training steps")
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int, help="Scenes per step")
    parser.add_argument("--save-every", type=int, help="Checkpoint interval in steps")
    parser.add_argument("--lambda-grad", type=float, help="Weight of the gradient loss")
    parser.add_argument("--renormalize-init", action="store_const", const=True,
                        help="Rescale the source sample to unit variance")
    parser.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")
    parser.set_defaults(handler=run)
    return parser


def _trim_log(path: Path, before_step: int) -> None:
    """Keep only log records of steps already contained in the resumed checkpoint."""
    if not path.exists():
        return
    kept = [
        line for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and json.loads(line)["step"] < before_step
    ]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def run(args: argparse.Namespace) -> int:
    data_dir = Path(args.data or settings.data_dir)
    manifest = read_manifest(data_dir)
    config = resolve_config(args, FLAG_MAPPING, base={"scene": manifest["spec"]})

    out = Path(args.out or Path(settings.runs_dir) / config.variant)
    checkpoint_path = out / CHECKPOINT_NAME
    log_path = out / TRAIN_LOG_NAME
    resuming = args.resume and checkpoint_path.exists()
    if not resuming:
        prepare_output(out, CHECKPOINT_NAME, args.force)
    config = config.model_copy(update={
        "paths": config.paths.model_copy(update={"data_dir": str(data_dir), "checkpoint": str(checkpoint_path)})
    })

    scenes = [scene for _, scene in load_dataset(data_dir)]

    if resuming:
        checkpoint = load_checkpoint(checkpoint_path)
        check_compatible(checkpoint, config, resume=True)
        trainer = make_trainer(config, scenes, model=restore_model(checkpoint))
        restore_optimizer(trainer.optimizer, trainer.model, checkpoint)
        start = checkpoint.step
        _trim_log(log_path, start)
        logger.info(f"Resuming {config.variant} from step {start}", extra={"variant": config.variant, "step": start})
    else:
        trainer = make_trainer(config, scenes)
        start = 0
        log_path.unlink(missing_ok=True)
        # a step-0 checkpoint guarantees a last good state if the first steps diverge
        save_checkpoint(checkpoint_path, trainer.model, config, 0, trainer.optimizer)

    write_resolved_config(out, config)
    total = config.flow.train_steps
    save_every = config.flow.save_every

    with open(log_path, "a", encoding="utf-8") as log_file:
        def on_step(result: StepResult) -> None:
            record = TrainLogRecord(
                step=result.step,
                rf_loss=result.rf_loss,
                grad_loss=result.grad_loss,
                total=result.total,
                wall_ms=result.wall_ms,
            )
            log_file.write(record.model_dump_json() + "\n")
            completed = result.step + 1
            if completed % save_every == 0 and completed < total:
                log_file.flush()
                save_checkpoint(checkpoint_path, trainer.model, config, completed, trainer.optimizer)

        try:
            trainer.fit(start, total, on_step=on_step, progress=not args.quiet)
        except NumericalFailureError:
            logger.error(
                f"Training diverged; last good checkpoint kept at {checkpoint_path}",
                extra={"variant": config.variant},
            )
            raise

    save_checkpoint(checkpoint_path, trainer.model, config, max(total, start), trainer.optimizer)
    logger.info(
        f"Training finished: variant={config.variant}, steps={total}, checkpoint={checkpoint_path}",
        extra={"variant": config.variant, "step": total},
    )
    return EXIT_OK
