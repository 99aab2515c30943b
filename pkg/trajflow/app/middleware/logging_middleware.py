"""
Logging middleware for CLI commands.

Provides start/finish logging with timing information and run IDs, and turns
exceptions into structured error reports and process exit codes.
"""

import argparse
import logging
import sys
import time
import uuid
from typing import Callable, Optional, TextIO

from pydantic import ValidationError

from app.models.errors import (
    EXIT_OK,
    ErrorCode,
    ErrorDetail,
    ErrorResponse,
    create_error_response,
)
from app.services.exceptions import PipelineError

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], int]


class CommandLoggingMiddleware:
    """
    Wraps every command handler.

    Logs:
    - Command name and run ID
    - Processing time
    - Exit code
    - Error code and traceback for failures
    """

    def __init__(self, stderr: Optional[TextIO] = None):
        """
        Initialize logging middleware.

        Args:
            stderr: Stream receiving JSON error reports (defaults to sys.stderr)
        """
        self._stderr = stderr

    @property
    def stderr(self) -> TextIO:
        return self._stderr or sys.stderr

    def dispatch(self, command: str, args: argparse.Namespace, handler: Handler) -> int:
        """
        Run a command and log details.

        Args:
            command: Command name
            args: Parsed arguments (args.run_id is set for the handler)
            handler: Command handler returning an exit code

        Returns:
            Process exit code
        """
        # Generate run ID for correlation
        run_id = uuid.uuid4().hex[:12]
        args.run_id = run_id
        start_time = time.perf_counter()

        logger.info(f"Starting command: {command}", extra={"run_id": run_id, "command": command})

        try:
            exit_code = handler(args)
        except PipelineError as e:
            response = create_error_response(
                e.code,
                message=str(e),
                details=[ErrorDetail(field=e.field, message=str(e), value=_jsonable(e.value))]
                if e.field else None,
            )
            self._fail(command, run_id, start_time, response, exc_info=False)
            return response.exit_code
        except ValidationError as e:
            response = create_error_response(
                ErrorCode.INVALID_CONFIG,
                message=f"Invalid configuration: {e.error_count()} error(s)",
                details=[
                    ErrorDetail(field=".".join(str(p) for p in err["loc"]), message=err["msg"])
                    for err in e.errors()
                ],
            )
            self._fail(command, run_id, start_time, response, exc_info=False)
            return response.exit_code
        except Exception as e:
            response = create_error_response(ErrorCode.INTERNAL_ERROR, message=f"{type(e).__name__}: {e}")
            self._fail(command, run_id, start_time, response, exc_info=True)
            return response.exit_code

        duration_ms = (time.perf_counter() - start_time) * 1000
        exit_code = EXIT_OK if exit_code is None else exit_code
        logger.info(
            f"Command completed: {command} - exit {exit_code}",
            extra={
                "run_id": run_id,
                "command": command,
                "exit_code": exit_code,
                "duration_ms": round(duration_ms, 2),
            },
        )
        return exit_code

    def _fail(
        self,
        command: str,
        run_id: str,
        start_time: float,
        response: ErrorResponse,
        exc_info: bool,
    ) -> None:
        duration_ms = (time.perf_counter() - start_time) * 1000
        logger.error(
            f"Command failed: {command} - {response.code.value}: {response.message}",
            extra={
                "run_id": run_id,
                "command": command,
                "exit_code": response.exit_code,
                "duration_ms": round(duration_ms, 2),
            },
            exc_info=exc_info,
        )
        print(response.model_dump_json(exclude_none=True), file=self.stderr)


def _jsonable(value):
    """Error values are echoed in reports; keep only JSON scalars."""
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return str(value)
