"""
Error models and exit-code mapping for the trajflow command line.

Provides structured error reports with consistent format and helpful messages.
"""

from typing import Optional, List, Any
from pydantic import BaseModel, ConfigDict, Field
from enum import Enum


class ErrorCode(str, Enum):
    """Standardized error codes for different failure types."""

    # Usage errors (exit 1)
    INVALID_CONFIG = "INVALID_CONFIG"
    INVALID_INPUT = "INVALID_INPUT"

    # Data errors (exit 2)
    DATASET_MISSING = "DATASET_MISSING"
    DATASET_EXISTS = "DATASET_EXISTS"
    DATASET_CORRUPT = "DATASET_CORRUPT"
    MISSING_FRAMES = "MISSING_FRAMES"
    EMPTY_INPUT = "EMPTY_INPUT"
    SCENE_GENERATION_FAILED = "SCENE_GENERATION_FAILED"
    DEGENERATE_ALIGNMENT = "DEGENERATE_ALIGNMENT"
    CHECKPOINT_MISMATCH = "CHECKPOINT_MISMATCH"

    # Numerical failures (exit 3)
    NUMERICAL_FAILURE = "NUMERICAL_FAILURE"
    NON_FINITE_INPUT = "NON_FINITE_INPUT"

    INTERNAL_ERROR = "INTERNAL_ERROR"


class ErrorDetail(BaseModel):
    """Detailed information about a specific error."""

    field: Optional[str] = Field(None, description="Field or path that caused the error")
    message: str = Field(..., description="Human-readable error message")
    value: Optional[Any] = Field(None, description="Offending value")


class ErrorResponse(BaseModel):
    """Standardized error report printed by the CLI on failure."""

    error: bool = Field(True, description="Always true for error reports")
    code: ErrorCode = Field(..., description="Error code for programmatic handling")
    exit_code: int = Field(..., description="Process exit code")
    message: str = Field(..., description="Human-readable error message")
    details: Optional[List[ErrorDetail]] = Field(None, description="Additional error details")
    suggestion: Optional[str] = Field(None, description="Suggested action to fix the error")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "error": True,
                "code": "DATASET_EXISTS",
                "exit_code": 2,
                "message": "Dataset already exists at data/easy",
                "details": [
                    {
                        "field": "out",
                        "message": "manifest.json present",
                        "value": "data/easy"
                    }
                ],
                "suggestion": "Pass --force to overwrite or choose another --out directory"
            }
        }
    )


# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

EXIT_CODES = {
    ErrorCode.INVALID_CONFIG: EXIT_USAGE,
    ErrorCode.INVALID_INPUT: EXIT_USAGE,
    ErrorCode.DATASET_MISSING: EXIT_DATA,
    ErrorCode.DATASET_EXISTS: EXIT_DATA,
    ErrorCode.DATASET_CORRUPT: EXIT_DATA,
    ErrorCode.MISSING_FRAMES: EXIT_DATA,
    ErrorCode.EMPTY_INPUT: EXIT_DATA,
    ErrorCode.SCENE_GENERATION_FAILED: EXIT_DATA,
    ErrorCode.DEGENERATE_ALIGNMENT: EXIT_DATA,
    ErrorCode.CHECKPOINT_MISMATCH: EXIT_DATA,
    ErrorCode.NUMERICAL_FAILURE: EXIT_NUMERICAL,
    ErrorCode.NON_FINITE_INPUT: EXIT_NUMERICAL,
    ErrorCode.INTERNAL_ERROR: EXIT_USAGE,
}


# Predefined error messages for consistency
ERROR_MESSAGES = {
    ErrorCode.INVALID_CONFIG: "The configuration is invalid",
    ErrorCode.INVALID_INPUT: "The input data violates a precondition",
    ErrorCode.DATASET_MISSING: "The requested dataset or scene does not exist",
    ErrorCode.DATASET_EXISTS: "A dataset already exists at the output location",
    ErrorCode.DATASET_CORRUPT: "A dataset file could not be decoded",
    ErrorCode.MISSING_FRAMES: "Generated frames are missing for one or more scenes",
    ErrorCode.EMPTY_INPUT: "No scenes were found to process",
    ErrorCode.SCENE_GENERATION_FAILED: "A scene could not be generated within the retry budget",
    ErrorCode.DEGENERATE_ALIGNMENT: "Point sets are degenerate for rigid alignment",
    ErrorCode.CHECKPOINT_MISMATCH: "The checkpoint does not match the scene or configuration",
    ErrorCode.NUMERICAL_FAILURE: "A non-finite value was produced during computation",
    ErrorCode.NON_FINITE_INPUT: "The input contains non-finite values",
    ErrorCode.INTERNAL_ERROR: "An unexpected internal error occurred",
}


# Error suggestions for common issues
ERROR_SUGGESTIONS = {
    ErrorCode.INVALID_CONFIG: "Check the config file keys against resolved_config.json of a previous run",
    ErrorCode.DATASET_MISSING: "Run 'gen-scenes' first or point --data at an existing dataset",
    ErrorCode.DATASET_EXISTS: "Pass --force to overwrite or choose another --out directory",
    ErrorCode.MISSING_FRAMES: "Run 'sample' for the listed scenes before evaluating",
    ErrorCode.EMPTY_INPUT: "Check that the generated and data directories contain scenes",
    ErrorCode.SCENE_GENERATION_FAILED: "Reduce trajectory_spread or change the seed",
    ErrorCode.CHECKPOINT_MISMATCH: "Train a checkpoint with the same resolution and frame count",
    ErrorCode.NUMERICAL_FAILURE: "Lower the learning rate; the last good checkpoint was kept",
}


def create_error_response(
    code: ErrorCode,
    message: Optional[str] = None,
    details: Optional[List[ErrorDetail]] = None,
    suggestion: Optional[str] = None
) -> ErrorResponse:
    """
    Create a standardized error report.

    Args:
        code: Error code
        message: Custom error message (uses default if not provided)
        details: List of error details
        suggestion: Custom suggestion (uses default if not provided)

    Returns:
        ErrorResponse object
    """
    return ErrorResponse(
        code=code,
        exit_code=EXIT_CODES.get(code, EXIT_USAGE),
        message=message or ERROR_MESSAGES.get(code, "An error occurred"),
        details=details,
        suggestion=suggestion or ERROR_SUGGESTIONS.get(code)
    )
