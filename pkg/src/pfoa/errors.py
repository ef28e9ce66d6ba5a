"""Exception hierarchy shared across the package."""


class PfoaError(Exception):
    """Base class for all package errors."""


class ConfigError(PfoaError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ValidationError(PfoaError, ValueError):
    pass


class GeometryError(PfoaError, ValueError):
    pass


class ShapeError(PfoaError, ValueError):
    pass


class MetricError(PfoaError, ValueError):
    pass


class SchemaError(PfoaError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class LoadError(PfoaError, IOError):
    pass
