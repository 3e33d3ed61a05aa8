"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class SrqaError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(SrqaError):
    """Tensor or image shapes do not satisfy an operation's contract."""


class RangeError(SrqaError):
    """A value lies outside its documented range (pixels, MOS, scale)."""


class DataError(SrqaError):
    """Dataset-level failure: missing file, malformed manifest, bad label."""


class WeightLoadError(SrqaError):
    """Pretrained backbone weights could not be loaded."""


class NumericError(SrqaError):
    """Numeric failure during training or evaluation (NaN loss, etc.)."""


class DegenerateWeightsError(NumericError):
    """A weight map sums to (numerically) zero, so its weighted mean is undefined."""


class ConstantInputError(NumericError):
    """Correlation requested for a zero-variance vector."""
