"""Exception types shared across the package."""


class RadSSLError(Exception):
    pass


class ValidationError(RadSSLError, ValueError):
    """Invalid configuration or input. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class GeometryError(RadSSLError, ValueError):
    """Shapes, grids or crop boxes that do not fit together."""


class FormatError(RadSSLError):
    """Base class for on-disk container problems."""


class HeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TrainingDiverged(RadSSLError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
