class PwesError(Exception):
    """Base class for toolkit errors."""


class FormatError(PwesError, ValueError):
    pass


class ShapeError(PwesError, ValueError):
    pass


class DataError(PwesError, ValueError):
    pass


class ConfigurationError(PwesError, ValueError):
    pass


class SynthesisError(PwesError, ValueError):
    pass


class NoAnnotationsError(PwesError, ValueError):
    """Raised when pseudo-label mining is requested for a video without point labels."""


class DivergenceError(PwesError, RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
