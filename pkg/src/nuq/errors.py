"""Exception types raised across the package."""


class NuqError(Exception):
    """Base class for all package errors."""


class ContractError(NuqError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NiftiFormatError(NuqError, ValueError):
    """The file is not a NIfTI-1 single-file image."""


class UnsupportedDatatypeError(NiftiFormatError):
    """The NIfTI datatype code is not one of u8, i16, f32, f64."""


class NiftiIOError(NuqError, OSError):
    """The file could not be read completely or written."""


class GradientParseError(NuqError, ValueError):
    """A bval/bvec file contains a token that is not a number."""


class GradientConsistencyError(NuqError, ValueError):
    """bval and bvec files disagree, or a table violates its invariants."""


class DegenerateVoxelError(NuqError, ValueError):
    """A signal vector has no positive entry and cannot be log-transformed."""


class RankDeficientError(NuqError, ValueError):
    """The design matrix does not have full column rank."""


class NumericError(NuqError, ValueError):
    """Non-finite input to a numerical routine."""


class DatasetValidationError(NuqError, ValueError):
    """A dataset failed validation; ``report`` lists the violations."""

    def __init__(self, report):
        self.report = list(report)
        super().__init__("; ".join(self.report) or "invalid dataset")
