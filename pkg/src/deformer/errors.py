from .tensor import NumericalError, ParameterError, ShapeError  # noqa: F401


class InputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class StateError(ValueError):
    """Segment states with the wrong role or layer were combined."""


class CacheCompatibilityError(ValueError):
    """A cached entry was produced by a different model or split layer."""


class FormatError(ValueError):
    """A binary artifact is truncated or malformed."""


class DependencyError(RuntimeError):
    """A pipeline stage ran before its prerequisite."""


class StaleArtifactError(RuntimeError):
    """An artifact's recorded fingerprint does not match its consumer."""
