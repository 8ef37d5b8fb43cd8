"""Exception hierarchy shared across the toolkit.

Every exception carries the process exit code the CLI maps it to:
1 = usage, 2 = file format/corruption, 3 = numerical/calibration.
"""


class LordError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class UsageError(LordError):
    """Bad arguments, unknown names, empty target sets."""

    exit_code = 1


class FormatError(LordError):
    """Unrecognized magic, header, or schema in a container file."""

    exit_code = 2


class CorruptionError(FormatError):
    """Container parsed but its payload is truncated or inconsistent."""


class VersionError(FormatError):
    """Container carries an unsupported format version."""


class ShapeError(LordError):
    """Dimension mismatch between tensors, stats, or descriptors."""


class RankError(LordError):
    """Requested rank outside the valid range for the target matrix."""


class CalibrationError(LordError):
    """Calibration statistics missing or insufficient for a layer."""


class NumericalError(LordError):
    """Non-finite results or solver non-convergence."""
