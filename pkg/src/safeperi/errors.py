"""Exception hierarchy shared by all modules.

The CLI reports failures as ``error: <ClassName>: <message>``, so class names
are part of the user-facing surface.
"""


class SafePeriError(Exception):
    pass


class InputError(SafePeriError, ValueError):
    """Malformed or unusable input data (empty raster, kernel larger than image...)."""


class ParameterError(SafePeriError, ValueError):
    """A configuration value violates an operation's precondition."""


class ExtractionError(SafePeriError):
    """Descriptor extraction impossible for this image/annotation."""


class IncompatibleDescriptorError(SafePeriError, ValueError):
    pass


class UndefinedScoreError(SafePeriError, ArithmeticError):
    """Raised instead of silently returning 0 for a score that has no meaning."""


class TrainingError(SafePeriError):
    pass


class AnnotationError(SafePeriError, ValueError):
    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class RunError(SafePeriError):
    """Too many per-pair failures for a matcher run to be meaningful."""
