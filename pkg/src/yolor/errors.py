"""Exception classes shared across modules."""

from .config import ConfigError
from .kernel import DimensionError, NumericError


class InputError(ValueError):
    """Malformed request, list or argument."""


class ResourceError(RuntimeError):
    """A requested computation exceeds a configured limit."""


class ConsistencyError(RuntimeError):
    """Two artefacts that must agree (cache, index, config) do not."""


class FormatError(ValueError):
    """A file does not follow its declared format."""


__all__ = ["ConfigError", "ConsistencyError", "DimensionError", "FormatError", "InputError",
           "NumericError", "ResourceError"]
