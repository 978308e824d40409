"""Exception taxonomy and the CLI exit codes they map to."""


class EIVSTError(Exception):
    """Base class for all package errors."""


class ValidationError(EIVSTError):
    """Bad configuration, arguments, or refused operation."""


class ConfigError(ValidationError):
    """Invalid module configuration (e.g. heads not dividing the model dim)."""


class ShapeError(ValidationError):
    """Tensor dimensions incompatible with the operation."""


class NoTransition(ValidationError):
    """Initial and target states are identical; nothing to plan."""


class InconsistentStates(ValidationError):
    """Target state is not reachable from the initial state under the verb."""


class OutOfBounds(ValidationError):
    """An entity does not fit on the canvas."""


class EmptyPlan(ValidationError):
    """A plan with zero steps where at least one is required."""


class InsufficientSamples(ValidationError):
    """Too few samples to estimate the statistic."""


class NotReady(ValidationError):
    """A required trained component is missing or untrained."""


class LockError(ValidationError):
    """A run directory is already locked by another process."""


class DecodeError(EIVSTError):
    """Malformed binary file.  Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersion(DecodeError):
    """File version not supported by this build."""


class DivergenceError(EIVSTError):
    """Training loss became non-finite; last good checkpoint was kept."""


class GradCheckError(EIVSTError):
    """Non-finite gradient encountered during gradient checking."""

    def __init__(self, param_name, message=None):
        super().__init__(message or f"non-finite gradient in parameter '{param_name}'")
        self.param_name = param_name


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def exit_code_for(exc):
    """Map an exception to the documented CLI exit code."""
    if isinstance(exc, DecodeError) or isinstance(exc, (OSError, FileNotFoundError)):
        return EXIT_IO
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, EIVSTError):
        return EXIT_VALIDATION
    return 1
