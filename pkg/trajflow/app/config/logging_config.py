"""
Logging configuration for the trajflow commands.

Console lines go through tqdm so they do not tear the progress bars of
training, sampling and scene generation. File logs are always JSON lines.
"""

import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, Dict

from tqdm import tqdm

# Extra record attributes promoted to top-level JSON fields
STRUCTURED_FIELDS = (
    "run_id",
    "command",
    "duration_ms",
    "exit_code",
    "step",
    "scene_id",
    "variant",
)

CONSOLE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s:%(lineno)d | %(message)s"
CONSOLE_DATEFMT = "%Y-%m-%d %H:%M:%S"


class StructuredFormatter(logging.Formatter):
    """
    One JSON object per record, parseable next to train_log.jsonl.

    Attributes named in STRUCTURED_FIELDS (set through ``extra=``) become
    top-level keys; records without them simply omit the key.
    """

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)
        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_data)


class ColoredFormatter(logging.Formatter):
    """Human-readable console lines with the level name colored per severity."""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def format(self, record: logging.LogRecord) -> str:
        levelname = record.levelname
        if levelname in self.COLORS:
            record.levelname = f"{self.COLORS[levelname]}{levelname}{self.RESET}"
        try:
            return super().format(record)
        finally:
            record.levelname = levelname


class TqdmHandler(logging.Handler):
    """Writes records to stderr above any active tqdm progress bar."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=sys.stderr)
        except Exception:
            self.handleError(record)


def setup_logging(
    log_level: str = "INFO",
    use_json: bool = False,
    log_file: str | None = None
) -> None:
    """
    Configure the root logger for one command run.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        use_json: JSON lines on the console instead of colored text
        log_file: Optional file receiving JSON lines
    """
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers = []

    # stderr keeps stdout free for the tables commands print
    console_handler = TqdmHandler(numeric_level)
    if use_json:
        console_handler.setFormatter(StructuredFormatter())
    elif sys.stderr.isatty():
        console_handler.setFormatter(ColoredFormatter(CONSOLE_FORMAT, CONSOLE_DATEFMT))
    else:
        console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, CONSOLE_DATEFMT))
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(StructuredFormatter())
        root_logger.addHandler(file_handler)

    # imageio decodes through PIL; matplotlib is noisy at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    logging.getLogger(__name__).debug(
        f"Logging configured: level={log_level}, json_format={use_json}, "
        f"file={log_file or 'none'}"
    )
