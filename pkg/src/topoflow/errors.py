"""Exception types and the process exit codes they map to.

The CLI contract is: 0 success, 1 usage, 2 configuration, 3 data/format,
4 numeric failure. Every raised exception carries its exit code so the
command dispatcher never has to guess.
"""


class TopoflowError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(TopoflowError):
    """Bad command line: unknown command, missing argument."""

    exit_code = 1


class ConfigError(TopoflowError):
    """Invalid or incomplete configuration (files, keys, stats lookups)."""

    exit_code = 2


class StatsError(ConfigError):
    """Normalization statistics that cannot be applied (sigma <= 0, hi <= lo)."""


class DataError(TopoflowError):
    """Bad data content: out-of-range values, non-finite inputs."""

    exit_code = 3


class FormatError(DataError):
    """Malformed .gfd container or manifest. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(DataError):
    """Array shapes inconsistent with the grid spec or each other."""


class MaskError(DataError):
    """Degenerate land mask (no cells selected)."""


class NumericError(TopoflowError):
    """Non-finite activations, gradients, or other numeric breakdown."""

    exit_code = 4


class StabilityError(NumericError):
    """CFL condition violated for the explicit integrator."""


class FitError(NumericError):
    """Degenerate least-squares fit (constant fields, empty support)."""
