"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, OSError -> 4.
"""


class ConfigError(Exception):
    """Invalid configuration value, flag, or config file."""


class DataError(Exception):
    """Invalid input data (bad labels, wrong image sizes, corrupt files)."""


class FormatError(DataError):
    """Malformed container file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompatibilityError(ConfigError):
    """Checkpoint does not match the model it is being loaded into."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class UsageError(RuntimeError):
    """An API was called outside its contract (missing gradient, non-scalar
    loss, backward without a tape, ...)."""


class ResolutionError(Exception):
    """A per-resolution positional-embedding table was queried at a grid it
    was never built for. This is the designed failure mode of that baseline."""
