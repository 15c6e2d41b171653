"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
TrainingError and failed numerical checks -> 4.
"""


class CluenetError(Exception):
    """Base class for all library errors."""


class DimensionError(CluenetError):
    """Operand shapes are incompatible with an operation's contract."""


class ConfigError(CluenetError):
    """A model or run configuration violates an invariant."""


class FormatError(CluenetError):
    """A file (checkpoint, trace, dataset, config) failed to parse."""


class TrainingError(CluenetError):
    """Training cannot proceed (missing gradient, non-finite loss)."""
