"""Exception and warning types raised across the package."""


class CCSOCRError(Exception):
    """Base class for all package errors."""


class ParameterError(CCSOCRError, ValueError):
    """An argument is outside its admissible range."""


class GridMismatchError(CCSOCRError, ValueError):
    """Two objects that must share a voxel grid (or pair list) do not."""


class SingularGeometryError(CCSOCRError, ValueError):
    """A voxel center coincides with an illumination or detection point."""


class NumericalError(CCSOCRError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(CCSOCRError, ValueError):
    """A signal or volume file is malformed.

    ``section`` names the part of the file that could not be parsed
    (``"magic"``, ``"header"``, ``"payload"`` or ``"checksum"``).
    """

    def __init__(self, section, message):
        super().__init__(f"{section}: {message}")
        self.section = section


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped before reaching its tolerance."""
