"""Error hierarchy. Library code raises these; the CLI maps them to exit codes."""


class GazeReachError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code = 2


# --- exit code 2: I/O, config, malformed input ---


class ConfigError(GazeReachError):
    """Config file missing, unparsable or invalid."""


class StorageError(GazeReachError):
    """File or directory cannot be read or written."""


class SchemaError(GazeReachError):
    """Trial CSV or JSON file does not follow the documented schema."""


class TrialValidationError(GazeReachError):
    """Stream content violates an invariant (e.g. non-monotone timestamps)."""

    def __init__(self, message: str, *, stream: str | None = None, row: int | None = None):
        super().__init__(message)
        self.stream = stream
        self.row = row


class LabelError(GazeReachError):
    """Unknown action label token."""


class ParameterError(GazeReachError):
    """Invalid parameter value (negative rate, zero duration, ...)."""


class InputError(GazeReachError):
    """Operation called with unusable input (e.g. an empty observation)."""


class CompatibilityError(GazeReachError):
    """Gaze pattern incompatible with the action label."""


class GeometryError(GazeReachError):
    """Degenerate scene geometry (coincident points, zero-length direction)."""


class ShapeError(GazeReachError):
    """Array dimension does not match the model."""


# --- exit code 3: data coverage ---


class CoverageError(GazeReachError):
    """Some action labels have no trials or no model."""

    exit_code = 3

    def __init__(self, message: str, *, missing: list[str] | None = None):
        super().__init__(message)
        self.missing = missing or []


# --- exit code 4: protocol ---


class LeakageError(GazeReachError):
    """Test trials overlap the trials a model bundle was trained on."""

    exit_code = 4


# --- exit code 5: numerical failure ---


class NumericalError(GazeReachError):
    """Numerical procedure failed."""

    exit_code = 5


class InsufficientDataError(NumericalError):
    """Fewer samples than the procedure needs."""


class NoOverlapError(NumericalError):
    """Streams share no common time range."""


class DataError(NumericalError):
    """Non-finite values in numeric input."""


class UnsupportedConditioningError(NumericalError):
    """Regression requested on a model whose input is not time alone."""


class IncompatibleModelError(NumericalError):
    """Models that must share time normalization do not."""


class DomainError(NumericalError):
    """Evaluation point outside the function's domain."""


class DesignError(NumericalError):
    """ANOVA design has an empty cell."""


class DegenerateDesignError(NumericalError):
    """ANOVA factor has a single level."""
