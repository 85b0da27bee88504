"""Exception hierarchy shared across the engine.

Each class maps to one CLI exit status so failures stay distinguishable
at the process boundary.
"""


class SemshapeError(Exception):
    """Base class; exit_code drives the CLI status."""

    exit_code = 1


class ConfigurationError(SemshapeError):
    """Bad user input: scene files, parameter ranges, checkpoints."""

    exit_code = 2


class DivergenceError(SemshapeError):
    """Optimization rejected too many steps and was aborted."""

    exit_code = 3


class PriorError(SemshapeError):
    """The diffusion prior failed or returned garbage."""

    exit_code = 4


class ProtocolError(PriorError):
    """Wire-level failure talking to a remote prior."""

    exit_code = 4


class OutputError(SemshapeError):
    """Filesystem failure writing results."""

    exit_code = 5


class DomainError(ValueError):
    """A query point left the field's domain; a caller bug, not user input."""


class ContractError(ValueError):
    """Mismatched shapes or invalid arguments between engine components."""
