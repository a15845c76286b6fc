"""Exception hierarchy shared by all distrain modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a plain
contract/state bug and surfaces as exit code 1.
"""


class DistrainError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DistrainError, ValueError):
    """A caller violated an operation precondition (shape mismatch, bad range)."""


class StateError(DistrainError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class ConfigError(DistrainError):
    """Invalid run configuration (unknown key, unparsable value)."""


class DataError(DistrainError):
    """Dataset could not be loaded or is structurally invalid."""


class NumericError(DistrainError):
    """Non-finite values appeared where finite math was required."""


class DegenerateSampleError(DistrainError):
    """Statistical test input has zero variance; the statistic is undefined."""
