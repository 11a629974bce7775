"""Exception types shared across the toolkit.

The CLI maps these onto its exit-code contract: usage errors exit 1,
data/format errors exit 2, numerical failures exit 3.
"""


class FireSenseError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(FireSenseError):
    """Operands have incompatible shapes or channel counts."""


class ConfigurationError(FireSenseError):
    """Invalid configuration value (bad kernel/stride/padding combo, widths, ...)."""


class NumericalError(FireSenseError):
    """A NaN/Inf showed up where only finite numbers are allowed."""


class FormatError(FireSenseError):
    """Malformed binary container or checkpoint.

    ``offset`` is the byte offset where decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedArchitectureError(FireSenseError):
    """Operation requires a model feature this architecture does not have."""


class EmptyMaskWarning(UserWarning):
    """Issued when a loss or metric sees zero valid pixels."""
