"""Exception types shared across the package.

The CLI maps these onto exit codes (config -> 2, numeric failure -> 4),
so library code should raise the most specific one that applies.
"""


class WebdetError(Exception):
    """Base class for all package errors."""


class ShapeError(WebdetError, ValueError):
    """Matrix dimensions do not line up."""


class InputError(WebdetError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ConfigError(WebdetError, ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(WebdetError, ValueError):
    """A dataset file or record cannot be parsed or fails validation."""


class TrainingError(WebdetError, RuntimeError):
    """Numeric failure during optimization (non-finite loss or gradient)."""


class CheckpointError(WebdetError, ValueError):
    """Checkpoint file is corrupt, wrong version, or structurally incompatible."""
