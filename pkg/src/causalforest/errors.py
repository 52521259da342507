"""Exception hierarchy.

Errors fall in three families that the command line maps onto exit codes:
usage errors (1), data errors (2) and numerical failures (3).
"""


class CausalForestError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class UsageError(CausalForestError):
    exit_code = 1


class DataError(CausalForestError):
    exit_code = 2


class NumericalError(CausalForestError):
    exit_code = 3


# -- usage -----------------------------------------------------------------


class InvalidParams(UsageError, ValueError):
    pass


class UnknownMethod(UsageError, ValueError):
    pass


class UnknownDgp(UsageError, ValueError):
    pass


class FormatVersionMismatch(UsageError, ValueError):
    pass


# -- data ------------------------------------------------------------------


class EmptyFile(DataError):
    pass


class MissingColumn(DataError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class NonBinaryTreatment(DataError, ValueError):
    pass


class NonFiniteValue(DataError, ValueError):
    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        super().__init__(f"non-finite value {value!r} at row {row}, column {col!r}")


class DegenerateSplit(DataError, ValueError):
    pass


class MissingOraclePropensity(DataError, ValueError):
    pass


class EmptyAfterTrim(DataError, ValueError):
    pass


class NotHeldOut(DataError, ValueError):
    pass


# -- numerical -------------------------------------------------------------


class InsufficientData(NumericalError, ValueError):
    pass


class ZeroTreatmentVariation(NumericalError, ValueError):
    pass


class NoEligibleTrees(NumericalError):
    def __init__(self, message, rows=()):
        self.rows = list(rows)
        super().__init__(message)


class DegenerateKernel(NumericalError):
    pass


class TooFewGroups(NumericalError):
    pass


class PropensityOutOfBounds(NumericalError, ValueError):
    pass


class RankDeficient(NumericalError, ValueError):
    pass


class DegeneratePredictionsWarning(UserWarning):
    """Raised as a warning: the calibration test still reports the mean coefficient."""


class InSampleKernelWarning(UserWarning):
    pass
