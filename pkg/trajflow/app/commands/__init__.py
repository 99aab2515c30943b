"""
Command modules of the trajflow CLI. Each exposes add_parser(subparsers,
parents) and run(args) -> exit code.
"""

from app.commands import ablate, evaluate, gen_scenes, sample, train

COMMANDS = [gen_scenes, train, sample, evaluate, ablate]

__all__ = ["COMMANDS"]
