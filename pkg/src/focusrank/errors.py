"""Exception types shared across the package."""


class FocusrankError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(FocusrankError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(FocusrankError, ValueError):
    """Invalid configuration value or missing/unknown parameter name."""


class InputError(FocusrankError, ValueError):
    """Malformed or empty runtime input (sequences, clips, galleries)."""


class UsageError(FocusrankError, ValueError):
    """An API was called in an unsupported way."""


class FormatError(FocusrankError, ValueError):
    """A serialized file is corrupt or has the wrong layout.

    `offset` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingAbort(FocusrankError, RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""
