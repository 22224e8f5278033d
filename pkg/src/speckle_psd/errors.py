"""Exception types shared across the package."""


class SpecklePSDError(Exception):
    """Base class for all package errors."""


class AllZeroError(SpecklePSDError):
    """Input carries no mass (all weights or values are zero)."""


class NegativeWeightError(SpecklePSDError):
    """A density weight is negative; the offending index is reported."""

    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"negative weight {value!r} at index {index}")


class GridMismatchError(SpecklePSDError):
    """Two objects that must share a grid do not."""


class NonMonotoneInputError(SpecklePSDError):
    """A cumulative curve is expected to be non-decreasing but is not."""


class FrameTooLargeError(SpecklePSDError):
    """Frame exceeds the size guard of the O(N^2) oracle path."""


class InsufficientFramesError(SpecklePSDError):
    """Fewer frames than one averaging window."""


class CenterOutOfBoundsError(SpecklePSDError):
    """Radial profile center lies outside the image."""


class BeamTooSmallError(SpecklePSDError):
    """Beam span cannot accommodate at least two particles."""


class ZeroFirstMomentError(SpecklePSDError):
    """PSD first moment is zero; the normalization constant is undefined."""


class ZeroVarianceError(SpecklePSDError):
    """Pearson correlation is undefined for a constant vector."""


class UnnormalizedInputError(SpecklePSDError):
    """Profile values must lie in [0, 1] before correction is applied."""


class DivergedLossError(SpecklePSDError):
    """Fit ended with a loss above its starting value."""
