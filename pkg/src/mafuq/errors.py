"""Exception hierarchy shared by all modules."""


class MafError(Exception):
    """Base class for all library errors."""


class ParameterError(MafError, ValueError):
    """An argument is out of its allowed domain."""


class ShapeError(MafError, ValueError):
    """Volume or slice dimensions do not agree."""


class DegenerateInputError(MafError, ValueError):
    """Input is well-formed but carries no usable information (empty mask, zero variance...)."""


class ExternalPredictorError(MafError, RuntimeError):
    """An external predictor process failed or produced a malformed response."""

    def __init__(self, message, returncode=None, diagnostics=""):
        if diagnostics:
            message = f"{message}\n--- child diagnostics ---\n{diagnostics}"
        super().__init__(message)
        self.returncode = returncode
        self.diagnostics = diagnostics


class VolumeIOError(MafError, OSError):
    """A volume file could not be read or written."""
