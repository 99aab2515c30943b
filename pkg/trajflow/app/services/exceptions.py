"""
Custom exceptions for trajflow services.

Every exception carries an ErrorCode so the command layer can map it to an
exit code and a structured error report.
"""

from app.models.errors import ErrorCode


class PipelineError(Exception):
    """Base exception for pipeline failures."""

    code: ErrorCode = ErrorCode.INTERNAL_ERROR

    def __init__(self, message: str, field: str | None = None, value: object = None):
        """
        Initialize pipeline error.

        Args:
            message: Error message
            field: Config field, path or argument that caused the error (if applicable)
            value: Offending value (if applicable)
        """
        self.field = field
        self.value = value
        super().__init__(message)


class InvalidInputError(PipelineError, ValueError):
    """Raised when an operation's precondition is violated (shapes, ranges)."""

    code = ErrorCode.INVALID_INPUT


class DegenerateAlignmentError(PipelineError, ValueError):
    """Raised when point sets are too few or collinear for rigid alignment."""

    code = ErrorCode.DEGENERATE_ALIGNMENT

    def __init__(self, num_points: int, reason: str):
        """
        Initialize degeneracy error.

        Args:
            num_points: Number of points supplied
            reason: Why the configuration is degenerate
        """
        super().__init__(f"Degenerate alignment input ({num_points} points): {reason}",
                         field="points", value=num_points)
        self.num_points = num_points


class SceneGenerationError(PipelineError):
    """Raised when a scene cannot be generated."""

    code = ErrorCode.SCENE_GENERATION_FAILED


class FrustumCoverageError(SceneGenerationError):
    """Raised when too few scene points stay inside every camera frustum."""

    def __init__(self, seed: int, coverage: float, required: float):
        """
        Initialize coverage error.

        Args:
            seed: Sub-seed of the failed attempt
            coverage: Fraction of points visible from every camera
            required: Minimum acceptable fraction
        """
        super().__init__(
            f"Only {coverage:.1%} of points stay in frustum for seed {seed} "
            f"(required {required:.0%})",
            field="seed",
            value=seed
        )
        self.coverage = coverage


class DatasetError(PipelineError):
    """Raised when a dataset or scene directory is missing or unreadable."""

    code = ErrorCode.DATASET_MISSING


class DatasetExistsError(DatasetError):
    """Raised when writing over an existing dataset without --force."""

    code = ErrorCode.DATASET_EXISTS

    def __init__(self, path: str):
        super().__init__(f"Dataset already exists at {path}", field="out", value=path)


class DatasetCorruptError(DatasetError):
    """Raised when a scene file fails to decode."""

    code = ErrorCode.DATASET_CORRUPT


class MissingFramesError(DatasetError):
    """Raised when generated frames for a scene are absent."""

    code = ErrorCode.MISSING_FRAMES


class CheckpointMismatchError(PipelineError):
    """Raised when a checkpoint's configuration does not match its inputs."""

    code = ErrorCode.CHECKPOINT_MISMATCH


class NumericalFailureError(PipelineError):
    """Raised when a loss or output becomes non-finite."""

    code = ErrorCode.NUMERICAL_FAILURE


class NonFiniteInputError(NumericalFailureError, ValueError):
    """Raised when an input tensor contains NaN or infinity."""

    code = ErrorCode.NON_FINITE_INPUT


class EmptyInputError(DatasetError):
    """Raised when a command finds nothing to process."""

    code = ErrorCode.EMPTY_INPUT


class InvalidConfigError(PipelineError):
    """Raised when a config file or flag combination fails validation."""

    code = ErrorCode.INVALID_CONFIG
