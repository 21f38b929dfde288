"""Exception hierarchy shared across the package."""


class DenetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DenetError):
    """Operands have incompatible or unexpected shapes."""


class InvalidSpecError(DenetError):
    """An operation spec is internally inconsistent or yields an empty output."""


class TapeError(DenetError):
    """Gradient-tape contract violation (non-scalar loss, repeated backward, ...)."""


class InputValidationError(DenetError):
    """An external input (annotation, detection, config, file) violates its schema."""


class ConfigError(InputValidationError):
    """A run configuration violates an invariant; the message names it."""


class TrainingError(DenetError):
    """Training aborted (non-finite loss, empty batch, ...)."""
