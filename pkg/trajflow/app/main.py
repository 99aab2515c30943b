import argparse
import logging
import sys
from typing import List, Optional

import torch

from app.commands import COMMANDS
from app.config.logging_config import setup_logging
from app.config.settings import settings
from app.middleware import CommandLoggingMiddleware
from app.models.errors import EXIT_USAGE

logger = logging.getLogger(__name__)

DESCRIPTION = """
trajflow: camera-controlled video generation from a noisy point-cloud prior.

Commands:
  gen-scenes  write a synthetic dataset of scenes with noisy point clouds
  train       fit the velocity network of one ablation variant
  sample      generate videos for dataset scenes from a checkpoint
  eval        score generated videos (PSNR, SSIM, trajectory errors)
  ablate      train and evaluate several variants over several seeds

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
"""


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Base seed of the command")
    common.add_argument("--config", help="JSON config file (flags take precedence)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    common.add_argument("--quiet", action="store_true", help="Only warnings and errors, no progress bars")
    common.add_argument("--log-json", action="store_true", default=None, help="JSON log lines on stderr")

    parser = CliParser(
        prog="trajflow",
        description=DESCRIPTION,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    subparsers.required = True
    for command in COMMANDS:
        command.add_parser(subparsers, [common])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(
        log_level="WARNING" if args.quiet else settings.log_level,
        use_json=settings.log_json_format if args.log_json is None else args.log_json,
        log_file=settings.log_file,
    )
    torch.set_num_threads(settings.torch_num_threads)
    logger.debug(
        f"trajflow starting: data_dir={settings.data_dir}, runs_dir={settings.runs_dir}, "
        f"torch_threads={settings.torch_num_threads}"
    )

    return CommandLoggingMiddleware().dispatch(args.command, args, args.handler)


if __name__ == "__main__":
    sys.exit(main())
