"""Exception taxonomy shared across the package.

Every error raised by library code is one of these classes, so callers
(including the CLI) can map failures to a stable machine-readable kind.
"""


class PromptsegError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptsegError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(PromptsegError, ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(PromptsegError, ValueError):
    """An API precondition was violated (for example backward on a non-scalar)."""


class InputError(PromptsegError, ValueError):
    """Runtime input data is invalid for the operation."""


class DegenerateInputError(InputError):
    """Input is structurally degenerate (for example a polygon with no area)."""


class FormatError(PromptsegError, ValueError):
    """A file or stream does not conform to the expected on-disk format."""


class TrainingDiverged(PromptsegError, RuntimeError):
    """A non-finite loss or gradient was produced during optimization."""
