"""Exception hierarchy shared by all modules.

Every error raised on purpose derives from BackendError so callers (and
the CLI, which maps error kinds to stable exit codes) can tell failure
modes apart.
"""


class BackendError(Exception):
    """Base class for all errors raised by this package."""


class FileFormatError(BackendError):
    """Malformed record in a text or binary input file."""


class DimensionMismatchError(BackendError):
    """Vectors or matrices with incompatible dimensions."""


class DomainError(BackendError):
    """Input outside an operation's mathematical domain (e.g. a zero vector)."""


class ParameterError(BackendError):
    """Invalid hyperparameter, flag value or structural precondition."""


class NumericalError(BackendError):
    """Singular, indefinite or otherwise numerically unusable quantity."""


class UnknownIdError(BackendError):
    """A trial references an embedding id that is not available."""


class RoutingError(BackendError):
    """Trial metadata missing or inconsistent during condition routing."""


class ConfigError(BackendError):
    """Pipeline or routing configuration incomplete or invalid."""


class NormalizationError(BackendError):
    """Degenerate cohort statistics during score normalization."""


class CalibrationFitError(BackendError):
    """Calibration training impossible on the given development trials."""


class MetricError(BackendError):
    """Metric undefined for the given score/label set."""
